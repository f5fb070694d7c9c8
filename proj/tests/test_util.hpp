#pragma once

#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <string>

#include "featureloop/core.hpp"

namespace fltest {

// Scratch directory removed on destruction.
class TempDir {
 public:
  TempDir() {
    std::string tmpl = (std::filesystem::temp_directory_path() / "fltest-XXXXXX").string();
    if (!mkdtemp(tmpl.data())) throw std::runtime_error("mkdtemp failed");
    path_ = tmpl;
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline featureloop::ScoreRecord make_record(double baseline, double extended, std::string agent = "a1",
                                            std::string text = "") {
  featureloop::ScoreRecord r;
  if (text.empty()) text = "Prompt " + std::to_string(extended) + " {raw_text}";
  r.prompt_text = text;
  r.prompt_id = featureloop::content_hash(text);
  r.agent_id = std::move(agent);
  r.baseline_rig = baseline;
  r.extended_rig = extended;
  r.relative_score = extended - baseline;
  r.eval_size = 100;
  r.repeats = 3;
  r.status = featureloop::Status::ok;
  r.created_at = "2024-01-01T00:00:00.000Z";
  return r;
}

// A record whose relative_score is exactly `score` (baseline 0).
inline featureloop::ScoreRecord scored(double score, std::string text = "", std::string agent = "a1") {
  return make_record(0.0, score, std::move(agent), std::move(text));
}

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

inline void spit(const std::filesystem::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << s;
}

}  // namespace fltest

#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <mutex>
#include <string>
#include <unordered_set>
#include <vector>

#include "featureloop/core.hpp"
#include "featureloop/sealed_log.hpp"

namespace featureloop {

/// Encodes a record as one sealed log line (including the trailing newline).
/// Field order is fixed; see README for the exact layout.
inline std::string encode_record(const ScoreRecord& r) {
  std::string body;
  body.reserve(256 + r.prompt_text.size());
  body += "{\"seq\":" + std::to_string(r.seq);
  body += ",\"prompt_id\":" + json_string(r.prompt_id);
  body += ",\"prompt_text\":" + json_string(r.prompt_text);
  body += ",\"agent_id\":" + json_string(r.agent_id);
  body += ",\"baseline_rig\":" + json_number(r.baseline_rig);
  body += ",\"extended_rig\":" + json_number(r.extended_rig);
  body += ",\"relative_score\":" + json_number(r.relative_score);
  body += ",\"eval_size\":" + std::to_string(r.eval_size);
  body += ",\"repeats\":" + std::to_string(r.repeats);
  body += ",\"status\":" + json_string(to_string(r.status));
  body += ",\"created_at\":" + json_string(r.created_at);
  return seal_line(std::move(body));
}

inline std::optional<ScoreRecord> decode_record(const nlohmann::json& j) {
  try {
    ScoreRecord r;
    r.seq = j.at("seq").get<std::int64_t>();
    r.prompt_id = j.at("prompt_id").get<std::string>();
    r.prompt_text = j.at("prompt_text").get<std::string>();
    r.agent_id = j.at("agent_id").get<std::string>();
    r.baseline_rig = j.at("baseline_rig").get<double>();
    r.extended_rig = j.at("extended_rig").get<double>();
    r.relative_score = j.at("relative_score").get<double>();
    r.eval_size = j.at("eval_size").get<std::int64_t>();
    r.repeats = j.at("repeats").get<std::int64_t>();
    auto status = parse_status(j.at("status").get<std::string>());
    if (!status) return std::nullopt;
    r.status = *status;
    r.created_at = j.at("created_at").get<std::string>();
    return r;
  } catch (const nlohmann::json::exception&) {
    return std::nullopt;
  }
}

inline nlohmann::json to_json(const ScoreRecord& r) {
  return nlohmann::json::parse(encode_record(r));
}

// Throws InvalidRecord when `r` violates the record invariants.
inline void check_record(const ScoreRecord& r) {
  auto fail = [](const std::string& why) {
    throw StorageError(StorageError::Kind::InvalidRecord, "invalid record: " + why);
  };
  if (r.prompt_id.empty()) fail("empty prompt_id");
  if (!std::isfinite(r.baseline_rig) || !std::isfinite(r.extended_rig) ||
      !std::isfinite(r.relative_score)) {
    fail("non-finite score");
  }
  if (r.baseline_rig > 1.0 || r.extended_rig > 1.0) fail("RIG above 1");
  if (r.status == Status::ok && r.relative_score != r.extended_rig - r.baseline_rig) {
    fail("relative_score != extended_rig - baseline_rig");
  }
  if (r.eval_size < 1 || r.repeats < 1) fail("eval_size and repeats must be positive");
}

// Orders by relative_score descending, then older (lower seq) first.
inline bool better_than(const ScoreRecord& a, const ScoreRecord& b) {
  if (a.relative_score != b.relative_score) return a.relative_score > b.relative_score;
  return a.seq < b.seq;
}

inline bool worse_than(const ScoreRecord& a, const ScoreRecord& b) {
  if (a.relative_score != b.relative_score) return a.relative_score < b.relative_score;
  return a.seq < b.seq;
}

/// The joint memory: an append-only, checksummed log of ScoreRecords shared by
/// every agent. Writers serialize on a sidecar lock file, so any number of
/// processes (or machines on a shared filesystem) may append concurrently.
/// Readers never lock; they consume only complete, checksum-valid lines whose
/// seq continues the sequence, so a torn final line is invisible to them.
///
/// One instance caches what it has already read; `read_since` only parses
/// bytes appended since the last call.
class MemoryStore {
 public:
  struct Options {
    bool durable = true;       // fdatasync after every append
    bool auto_recover = true;  // truncate a torn tail inside append()
  };

  explicit MemoryStore(std::filesystem::path path) : MemoryStore(std::move(path), Options{}) {}
  MemoryStore(std::filesystem::path path, Options opts)
      : log_(std::move(path), opts.durable), opts_(opts) {}

  const std::filesystem::path& path() const { return log_.path(); }

  /// Appends `record` (its seq is ignored) and returns the assigned seq.
  std::int64_t append(ScoreRecord record) {
    check_record(record);
    return log_.with_lock([&] {
      std::lock_guard guard(mutex_);
      const std::uint64_t size = refresh_locked();
      if (size > offset_) {
        if (!opts_.auto_recover) {
          throw StorageError(StorageError::Kind::CorruptTail,
                             "invalid bytes after offset " + std::to_string(offset_) + " in " +
                                 log_.path().string());
        }
        log_.truncate(offset_);
      }
      record.seq = static_cast<std::int64_t>(records_.size());
      log_.write_line(encode_record(record));
      // Adopt the line we just wrote.
      refresh_locked();
      return record.seq;
    });
  }

  /// Truncates any invalid tail back to the last valid record. Returns the
  /// number of bytes dropped.
  std::uint64_t recover() {
    return log_.with_lock([&] {
      std::lock_guard guard(mutex_);
      const std::uint64_t size = refresh_locked();
      if (size <= offset_) return std::uint64_t{0};
      log_.truncate(offset_);
      return size - offset_;
    });
  }

  /// Records with seq strictly greater than `seq`, in order. Pass -1 for all.
  std::vector<ScoreRecord> read_since(std::int64_t seq) const {
    std::lock_guard guard(mutex_);
    refresh_locked();
    const auto from = static_cast<std::size_t>(std::max<std::int64_t>(seq + 1, 0));
    if (from >= records_.size()) return {};
    return {records_.begin() + static_cast<std::ptrdiff_t>(from), records_.end()};
  }

  std::vector<ScoreRecord> read_all() const { return read_since(-1); }

  // Seq of the newest record, or -1 when empty.
  std::int64_t last_seq() const {
    std::lock_guard guard(mutex_);
    refresh_locked();
    return static_cast<std::int64_t>(records_.size()) - 1;
  }

  std::vector<ScoreRecord> top_k(std::size_t k) const { return select_k(k, better_than); }
  std::vector<ScoreRecord> bottom_k(std::size_t k) const { return select_k(k, worse_than); }

  bool contains(const std::string& prompt_id) const {
    std::lock_guard guard(mutex_);
    refresh_locked();
    return prompt_ids_.count(prompt_id) > 0;
  }

 private:
  template <class Less>
  std::vector<ScoreRecord> select_k(std::size_t k, Less less) const {
    std::vector<ScoreRecord> ok;
    {
      std::lock_guard guard(mutex_);
      refresh_locked();
      for (const auto& r : records_) {
        if (r.status == Status::ok) ok.push_back(r);
      }
    }
    k = std::min(k, ok.size());
    std::partial_sort(ok.begin(), ok.begin() + static_cast<std::ptrdiff_t>(k), ok.end(), less);
    ok.resize(k);
    return ok;
  }

  // Parses newly appended lines; returns the current file size.
  std::uint64_t refresh_locked() const {
    auto scan = log_.scan(offset_);
    if (scan.missing) {
      if (!records_.empty()) {
        throw StorageError(StorageError::Kind::StorageUnavailable,
                           "memory log disappeared: " + log_.path().string());
      }
      return 0;
    }
    for (auto& entry : scan.entries) {
      auto rec = decode_record(entry.object);
      if (!rec || rec->seq != static_cast<std::int64_t>(records_.size())) break;
      prompt_ids_.insert(rec->prompt_id);
      records_.push_back(std::move(*rec));
      offset_ = entry.end_offset;
    }
    return scan.file_size;
  }

  SealedLog log_;
  Options opts_;
  mutable std::mutex mutex_;
  mutable std::vector<ScoreRecord> records_;
  mutable std::unordered_set<std::string> prompt_ids_;
  mutable std::uint64_t offset_ = 0;
};

}  // namespace featureloop

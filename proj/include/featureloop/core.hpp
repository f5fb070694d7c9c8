#pragma once

#include <openssl/evp.h>

#include <algorithm>
#include <array>
#include <cctype>
#include <chrono>
#include <cstdint>
#include <ctime>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace featureloop {

// Base of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::string_view kPlaceholder = "{raw_text}";

// ---------------------------------------------------------------------------
// Text helpers

inline bool is_space(char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f';
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && is_space(s.front())) s.remove_prefix(1);
  while (!s.empty() && is_space(s.back())) s.remove_suffix(1);
  return s;
}

// Trim both ends, then collapse runs of ' ' into one. Case and other
// characters are left alone.
inline std::string normalize_template_text(std::string_view text) {
  std::string_view t = trim(text);
  std::string out;
  out.reserve(t.size());
  for (char c : t) {
    if (c == ' ' && !out.empty() && out.back() == ' ') continue;
    out.push_back(c);
  }
  return out;
}

// Trim and collapse every whitespace run (any kind) into a single space.
inline std::string collapse_whitespace(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  bool pending = false;
  for (char c : text) {
    if (is_space(c)) {
      pending = !out.empty();
      continue;
    }
    if (pending) out.push_back(' ');
    pending = false;
    out.push_back(c);
  }
  return out;
}

inline std::string to_lower_ascii(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

inline std::size_t count_occurrences(std::string_view haystack, std::string_view needle) {
  std::size_t n = 0;
  for (auto pos = haystack.find(needle); pos != std::string_view::npos;
       pos = haystack.find(needle, pos + needle.size())) {
    ++n;
  }
  return n;
}

// ---------------------------------------------------------------------------
// Hashing

using Digest = std::array<std::uint8_t, 32>;

inline Digest sha256(std::string_view bytes) {
  Digest out{};
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), out.data(), &len, EVP_sha256(), nullptr) != 1) {
    throw Error("sha256 digest failed");
  }
  return out;
}

inline std::string to_hex(const std::uint8_t* data, std::size_t n) {
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out(2 * n, '0');
  for (std::size_t i = 0; i < n; ++i) {
    out[2 * i] = kHex[data[i] >> 4];
    out[2 * i + 1] = kHex[data[i] & 0xf];
  }
  return out;
}

// SHA-256 over the normalized text, as 64 lowercase hex characters.
inline std::string content_hash(std::string_view text) {
  const Digest d = sha256(normalize_template_text(text));
  return to_hex(d.data(), d.size());
}

// First eight bytes of the content digest, big-endian.
inline std::uint64_t content_hash64(std::string_view text) {
  const Digest d = sha256(normalize_template_text(text));
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v = (v << 8) | d[i];
  return v;
}

// ---------------------------------------------------------------------------
// Time

using Clock = std::chrono::system_clock;
using Timestamp = Clock::time_point;

// RFC 3339 UTC with millisecond precision, e.g. 2026-01-02T03:04:05.678Z
inline std::string format_rfc3339(Timestamp t) {
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(t.time_since_epoch());
  const std::time_t secs = static_cast<std::time_t>(ms.count() / 1000);
  std::tm tm{};
  gmtime_r(&secs, &tm);
  char buf[40];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%S", &tm);
  char out[48];
  std::snprintf(out, sizeof(out), "%s.%03dZ", buf, static_cast<int>(ms.count() % 1000));
  return out;
}

inline std::string now_rfc3339() { return format_rfc3339(Clock::now()); }

// ---------------------------------------------------------------------------
// Domain types

class TemplateError : public Error {
 public:
  enum class Kind { MissingPlaceholder, DuplicatePlaceholder };
  TemplateError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

struct PromptTemplate {
  std::string id;
  std::string user_template;
  std::optional<std::string> parent_id;
  std::string agent_id;
  std::uint32_t generation = 0;
  std::string created_at;
};

/// Checks that `text` contains exactly one `{raw_text}` and returns a seed
/// template (generation 0, no parent) whose id is the content hash.
inline PromptTemplate validate_template(std::string_view text, std::string agent_id = {}) {
  const std::size_t n = count_occurrences(text, kPlaceholder);
  if (n == 0) {
    throw TemplateError(TemplateError::Kind::MissingPlaceholder,
                        "template has no {raw_text} placeholder");
  }
  if (n > 1) {
    throw TemplateError(TemplateError::Kind::DuplicatePlaceholder,
                        "template has " + std::to_string(n) + " {raw_text} placeholders");
  }
  PromptTemplate t;
  t.user_template = std::string(text);
  t.id = content_hash(text);
  t.agent_id = std::move(agent_id);
  t.created_at = now_rfc3339();
  return t;
}

// Derives a child template from `parent`; `text` must already be valid.
inline PromptTemplate derive_template(const PromptTemplate& parent, std::string_view text,
                                      std::string agent_id) {
  PromptTemplate t = validate_template(text, std::move(agent_id));
  t.parent_id = parent.id;
  t.generation = parent.generation + 1;
  return t;
}

inline constexpr std::string_view kUnspecified = "unspecified";
inline constexpr std::size_t kMaxTags = 10;

struct TagList {
  std::vector<std::string> tags;

  bool operator==(const TagList&) const = default;

  static TagList unspecified() { return TagList{{std::string(kUnspecified)}}; }
  bool is_unspecified() const { return tags.size() == 1 && tags.front() == kUnspecified; }
};

// 1..10 tags, each nonempty, comma-free, whitespace-normalized, and
// case-insensitively distinct.
inline bool is_valid(const TagList& list) {
  if (list.tags.empty() || list.tags.size() > kMaxTags) return false;
  std::vector<std::string> seen;
  for (const auto& tag : list.tags) {
    if (tag.empty() || tag.find(',') != std::string::npos) return false;
    if (collapse_whitespace(tag) != tag) return false;
    auto folded = to_lower_ascii(tag);
    if (std::find(seen.begin(), seen.end(), folded) != seen.end()) return false;
    seen.push_back(std::move(folded));
  }
  return true;
}

inline std::string join(const std::vector<std::string>& parts, std::string_view sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}

struct Document {
  std::string id;
  std::string raw_text;
  std::map<std::string, std::string> meta;
};

inline Document make_document(std::string raw_text) {
  if (trim(raw_text).empty()) throw Error("document text must be nonempty");
  Document d;
  d.id = content_hash(raw_text);
  d.raw_text = std::move(raw_text);
  return d;
}

enum class Status { ok, extraction_failed, eval_failed };

inline std::string_view to_string(Status s) {
  switch (s) {
    case Status::ok: return "ok";
    case Status::extraction_failed: return "extraction_failed";
    case Status::eval_failed: return "eval_failed";
  }
  return "ok";
}

inline std::optional<Status> parse_status(std::string_view s) {
  if (s == "ok") return Status::ok;
  if (s == "extraction_failed") return Status::extraction_failed;
  if (s == "eval_failed") return Status::eval_failed;
  return std::nullopt;
}

struct ScoreRecord {
  std::int64_t seq = -1;  // assigned by the memory store
  std::string prompt_id;
  std::string prompt_text;
  std::string agent_id;
  double baseline_rig = 0.0;
  double extended_rig = 0.0;
  double relative_score = 0.0;
  std::int64_t eval_size = 1;
  std::int64_t repeats = 1;
  Status status = Status::ok;
  std::string created_at;

  bool operator==(const ScoreRecord&) const = default;
};

}  // namespace featureloop

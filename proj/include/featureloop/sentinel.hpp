#pragma once

#include <algorithm>
#include <atomic>
#include <filesystem>
#include <map>
#include <mutex>
#include <shared_mutex>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "featureloop/core.hpp"
#include "featureloop/llm.hpp"
#include "featureloop/sealed_log.hpp"

namespace featureloop {

inline constexpr std::string_view kSystemPrompt =
    "You are a data scientist researcher. Your job is to extract comma-separated information "
    "from text.";

inline constexpr std::string_view kSeedUserTemplate =
    "Extract up to ten comma-separated pieces of information from the input text provided next. "
    "The information can be anything you deem relevant as a feature for building a recommender "
    "system. Here is the text for processing: <begin raw text input> {raw_text} <end raw text "
    "input>.";

inline constexpr std::size_t kMaxWordsPerTag = 6;

/// Replaces the single `{raw_text}` in the template with the document text.
/// The document text is inserted verbatim and never re-scanned.
inline std::string ground(const PromptTemplate& tmpl, const Document& doc) {
  const auto pos = tmpl.user_template.find(kPlaceholder);
  if (pos == std::string::npos) return tmpl.user_template;
  std::string out;
  out.reserve(tmpl.user_template.size() + doc.raw_text.size());
  out.append(tmpl.user_template, 0, pos);
  out += doc.raw_text;
  out.append(tmpl.user_template, pos + kPlaceholder.size());
  return out;
}

/// Turns raw model output into a TagList. Never fails: anything unusable
/// degrades to ["unspecified"].
inline TagList parse_tags(std::string_view raw) {
  std::string_view line;
  while (!raw.empty()) {
    const auto nl = raw.find('\n');
    std::string_view candidate = raw.substr(0, nl);
    raw = nl == std::string_view::npos ? std::string_view{} : raw.substr(nl + 1);
    if (!trim(candidate).empty()) {
      line = candidate;
      break;
    }
  }

  TagList out;
  std::vector<std::string> folded;
  std::size_t start = 0;
  while (start <= line.size() && out.tags.size() < kMaxTags) {
    auto comma = line.find(',', start);
    if (comma == std::string_view::npos) comma = line.size();
    std::string tag = collapse_whitespace(line.substr(start, comma - start));
    start = comma + 1;
    if (tag.empty()) continue;
    if (static_cast<std::size_t>(std::count(tag.begin(), tag.end(), ' ')) + 1 > kMaxWordsPerTag) {
      continue;
    }
    auto key = to_lower_ascii(tag);
    if (std::find(folded.begin(), folded.end(), key) != folded.end()) continue;
    folded.push_back(std::move(key));
    out.tags.push_back(std::move(tag));
  }
  if (out.tags.empty()) return TagList::unspecified();
  return out;
}

// ---------------------------------------------------------------------------
// Extraction cache

/// Persistent (template_id, document_id) -> TagList map. Each line of the
/// backing file is a sealed JSON object. An empty path keeps it in memory.
class ExtractionCache {
 public:
  ExtractionCache() = default;
  explicit ExtractionCache(std::filesystem::path path) : log_(std::in_place, std::move(path), false) {
    load();
  }

  std::optional<TagList> get(const std::string& template_id, const std::string& document_id) const {
    std::shared_lock lock(mutex_);
    auto it = entries_.find(key(template_id, document_id));
    if (it == entries_.end()) return std::nullopt;
    return it->second;
  }

  void put(const std::string& template_id, const std::string& document_id, const TagList& tags) {
    std::unique_lock lock(mutex_);
    auto [it, inserted] = entries_.emplace(key(template_id, document_id), tags);
    if (!inserted || !log_) return;
    std::string body = "{\"template_id\":" + json_string(template_id);
    body += ",\"document_id\":" + json_string(document_id);
    body += ",\"tags\":[";
    for (std::size_t i = 0; i < tags.tags.size(); ++i) {
      if (i) body += ',';
      body += json_string(tags.tags[i]);
    }
    body += "],\"created_at\":" + json_string(now_rfc3339());
    log_->with_lock([&] { log_->write_line(seal_line(std::move(body))); });
  }

  std::size_t size() const {
    std::shared_lock lock(mutex_);
    return entries_.size();
  }

 private:
  static std::string key(const std::string& t, const std::string& d) { return t + '\x1f' + d; }

  void load() {
    auto scan = log_->scan(0);
    for (const auto& e : scan.entries) {
      try {
        TagList tags{e.object.at("tags").get<std::vector<std::string>>()};
        if (!is_valid(tags)) continue;
        entries_.emplace(key(e.object.at("template_id").get<std::string>(),
                             e.object.at("document_id").get<std::string>()),
                         std::move(tags));
      } catch (const nlohmann::json::exception&) {
        continue;
      }
    }
    if (!scan.missing && scan.file_size > (scan.entries.empty() ? 0 : scan.entries.back().end_offset)) {
      // Drop a torn tail left by an interrupted run.
      const auto keep = scan.entries.empty() ? 0 : scan.entries.back().end_offset;
      log_->with_lock([&] { log_->truncate(keep); });
    }
  }

  std::optional<SealedLog> log_;
  mutable std::shared_mutex mutex_;
  std::unordered_map<std::string, TagList> entries_;
};

// ---------------------------------------------------------------------------
// Extraction

class ExtractionError : public Error {
 public:
  enum class Kind { ExtractionFailed, ColumnFailed };
  ExtractionError(Kind kind, std::string what, std::string document_id = {},
                  double failure_fraction = 0.0)
      : Error(std::move(what)),
        kind_(kind),
        document_id_(std::move(document_id)),
        failure_fraction_(failure_fraction) {}
  Kind kind() const noexcept { return kind_; }
  const std::string& document_id() const noexcept { return document_id_; }
  double failure_fraction() const noexcept { return failure_fraction_; }

 private:
  Kind kind_;
  std::string document_id_;
  double failure_fraction_;
};

struct ExtractionOptions {
  double temperature = 0.2;
  int max_output_tokens = 256;
  std::string model;
  std::size_t parallelism = 4;
  double max_failure_fraction = 0.2;
};

struct FeatureColumn {
  std::string template_id;
  std::map<std::string, TagList> values;  // document_id -> tags
  double coverage = 0.0;                  // fraction not "unspecified"
  std::size_t failures = 0;
};

/// One document through the sentinel. Cache hits never touch the backend;
/// backend failures surface as ExtractionFailed and are not cached.
inline TagList extract(const PromptTemplate& tmpl, const Document& doc, Backend& backend,
                       ExtractionCache& cache, const ExtractionOptions& opts = {}) {
  if (auto hit = cache.get(tmpl.id, doc.id)) return *hit;
  ChatRequest req;
  req.system = std::string(kSystemPrompt);
  req.user = ground(tmpl, doc);
  req.temperature = opts.temperature;
  req.max_output_tokens = opts.max_output_tokens;
  req.model = opts.model;
  TagList tags;
  try {
    tags = parse_tags(backend.complete(req).text);
  } catch (const LlmError& e) {
    if (e.kind() == LlmError::Kind::AuthFailed) throw;
    throw ExtractionError(ExtractionError::Kind::ExtractionFailed,
                          "extraction failed for " + doc.id + ": " + e.what(), doc.id);
  }
  cache.put(tmpl.id, doc.id, tags);
  return tags;
}

/// Runs the sentinel over a corpus with at most `opts.parallelism` requests
/// in flight. Documents sharing an id are extracted once. Failed documents
/// become ["unspecified"]; more than `max_failure_fraction` failures throws
/// ColumnFailed. Results do not depend on the parallelism.
inline FeatureColumn extract_corpus(const PromptTemplate& tmpl, const std::vector<Document>& docs,
                                    Backend& backend, ExtractionCache& cache,
                                    const ExtractionOptions& opts = {}) {
  if (opts.parallelism < 1) throw Error("parallelism must be at least 1");
  std::vector<const Document*> unique;
  {
    std::unordered_map<std::string, bool> seen;
    for (const auto& d : docs) {
      if (seen.emplace(d.id, true).second) unique.push_back(&d);
    }
  }

  std::vector<TagList> results(unique.size());
  std::vector<char> failed(unique.size(), 0);
  std::atomic<std::size_t> next{0};
  std::mutex fatal_mutex;
  std::exception_ptr fatal;

  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= unique.size()) return;
      try {
        results[i] = extract(tmpl, *unique[i], backend, cache, opts);
      } catch (const ExtractionError&) {
        results[i] = TagList::unspecified();
        failed[i] = 1;
      } catch (...) {
        std::lock_guard g(fatal_mutex);
        if (!fatal) fatal = std::current_exception();
        next.store(unique.size());
        return;
      }
    }
  };

  const std::size_t n_threads = std::min(opts.parallelism, std::max<std::size_t>(unique.size(), 1));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    pool.reserve(n_threads);
    for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
  }
  if (fatal) std::rethrow_exception(fatal);

  FeatureColumn col;
  col.template_id = tmpl.id;
  std::size_t covered = 0;
  for (std::size_t i = 0; i < unique.size(); ++i) {
    col.failures += static_cast<std::size_t>(failed[i]);
    if (!results[i].is_unspecified()) ++covered;
    col.values.emplace(unique[i]->id, std::move(results[i]));
  }
  if (!unique.empty()) {
    col.coverage = static_cast<double>(covered) / static_cast<double>(unique.size());
    const double fraction = static_cast<double>(col.failures) / static_cast<double>(unique.size());
    if (fraction > opts.max_failure_fraction) {
      throw ExtractionError(ExtractionError::Kind::ColumnFailed,
                            "extraction failed for " + std::to_string(col.failures) + " of " +
                                std::to_string(unique.size()) + " documents",
                            {}, fraction);
    }
  }
  return col;
}

}  // namespace featureloop

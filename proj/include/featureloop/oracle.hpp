#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <future>
#include <map>
#include <numeric>
#include <shared_mutex>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "featureloop/core.hpp"
#include "featureloop/random.hpp"
#include "featureloop/sentinel.hpp"

namespace featureloop {

class OracleError : public Error {
 public:
  enum class Kind { DegenerateEval, DegenerateLabels, NonFinite, LengthMismatch, InvalidDataset };
  OracleError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

struct Impression {
  std::string document_id;
  std::int64_t time_index = 0;
  std::map<std::string, std::string> context;
  int label = 0;
};

struct CtrDataset {
  std::vector<Impression> impressions;  // ascending time_index
  std::vector<std::string> base_fields;
};

// Sorts by time_index and checks the dataset invariants.
inline void normalize_dataset(CtrDataset& ds) {
  if (ds.impressions.empty()) throw OracleError(OracleError::Kind::InvalidDataset, "empty dataset");
  std::stable_sort(ds.impressions.begin(), ds.impressions.end(),
                   [](const Impression& a, const Impression& b) { return a.time_index < b.time_index; });
  for (std::size_t i = 0; i < ds.impressions.size(); ++i) {
    const auto& imp = ds.impressions[i];
    if (imp.label != 0 && imp.label != 1) {
      throw OracleError(OracleError::Kind::InvalidDataset, "label must be 0 or 1");
    }
    if (imp.time_index < 0) throw OracleError(OracleError::Kind::InvalidDataset, "negative time_index");
    if (i > 0 && ds.impressions[i - 1].time_index == imp.time_index) {
      throw OracleError(OracleError::Kind::InvalidDataset,
                        "duplicate time_index " + std::to_string(imp.time_index));
    }
  }
}

// ---------------------------------------------------------------------------
// Metrics

/// Mean binary cross-entropy. Each term only evaluates the log of the
/// probability assigned to the observed label, so exact 0/1 predictions that
/// match their labels contribute 0.
inline double cross_entropy(std::span<const double> preds, std::span<const int> labels) {
  if (preds.size() != labels.size() || preds.empty()) {
    throw OracleError(OracleError::Kind::LengthMismatch,
                      "cross_entropy: " + std::to_string(preds.size()) + " predictions vs " +
                          std::to_string(labels.size()) + " labels");
  }
  double sum = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    sum += labels[i] ? std::log(preds[i]) : std::log1p(-preds[i]);
  }
  return -sum / static_cast<double>(preds.size());
}

/// Relative information gain against the constant empirical-CTR predictor:
/// 1 - CE(preds) / CE(mean label). At most 1; 0 at baseline parity.
inline double rig(std::span<const double> preds, std::span<const int> labels) {
  if (preds.size() != labels.size() || preds.empty()) {
    throw OracleError(OracleError::Kind::LengthMismatch, "rig: length mismatch");
  }
  const double positives = std::accumulate(labels.begin(), labels.end(), 0.0);
  const double p_bar = positives / static_cast<double>(labels.size());
  if (p_bar <= 0.0 || p_bar >= 1.0) {
    throw OracleError(OracleError::Kind::DegenerateLabels, "rig: labels contain a single class");
  }
  const std::vector<double> constant(labels.size(), p_bar);
  return 1.0 - cross_entropy(preds, labels) / cross_entropy(constant, labels);
}

// ---------------------------------------------------------------------------
// Split

struct Split {
  std::span<const Impression> train;
  std::span<const Impression> eval;
};

/// Last ceil(n * eval_fraction) impressions evaluate; the rest train.
inline Split temporal_split(const CtrDataset& ds, double eval_fraction) {
  if (!(eval_fraction > 0.0 && eval_fraction < 1.0)) {
    throw OracleError(OracleError::Kind::InvalidDataset, "eval_fraction must be in (0, 1)");
  }
  const std::size_t n = ds.impressions.size();
  // The epsilon keeps exact products such as 5 * 0.2 from rounding up.
  auto n_eval = static_cast<std::size_t>(std::ceil(static_cast<double>(n) * eval_fraction - 1e-9));
  n_eval = std::max<std::size_t>(n_eval, 1);
  if (n_eval >= n) {
    throw OracleError(OracleError::Kind::InvalidDataset,
                      "dataset of " + std::to_string(n) + " rows leaves no training data");
  }
  std::span<const Impression> all(ds.impressions);
  Split s{all.first(n - n_eval), all.last(n_eval)};
  const auto first = s.eval.front().label;
  if (std::all_of(s.eval.begin(), s.eval.end(), [&](const Impression& i) { return i.label == first; })) {
    throw OracleError(OracleError::Kind::DegenerateEval, "evaluation slice has a single label class");
  }
  return s;
}

// ---------------------------------------------------------------------------
// Features

inline constexpr std::string_view kMultiValueField = "mv";

inline bool is_power_of_two(std::uint64_t x) { return x >= 2 && (x & (x - 1)) == 0; }

/// Index of `field=value` in a table of `hash_dim` slots (a power of two).
inline std::uint32_t hash_index(std::string_view field, std::string_view value, std::uint32_t hash_dim) {
  std::string key;
  key.reserve(field.size() + value.size() + 1);
  key.append(field).append("=").append(value);
  return static_cast<std::uint32_t>(content_hash64(key) & (hash_dim - 1));
}

// Memoizing wrapper around hash_index; safe for concurrent use.
class FeatureHasher {
 public:
  explicit FeatureHasher(std::uint32_t hash_dim) : dim_(hash_dim) {
    if (!is_power_of_two(hash_dim)) throw Error("hash_dim must be a power of two >= 2");
  }

  std::uint32_t dim() const { return dim_; }

  std::uint32_t operator()(std::string_view field, std::string_view value) const {
    std::string key;
    key.append(field).append("=").append(value);
    {
      std::shared_lock lock(mutex_);
      if (auto it = memo_.find(key); it != memo_.end()) return it->second;
    }
    const auto idx = hash_index(field, value, dim_);
    std::unique_lock lock(mutex_);
    memo_.emplace(std::move(key), idx);
    return idx;
  }

 private:
  std::uint32_t dim_;
  mutable std::shared_mutex mutex_;
  mutable std::unordered_map<std::string, std::uint32_t> memo_;
};

struct Feature {
  std::uint32_t index;
  double value;
  bool operator==(const Feature&) const = default;
};

using SparseRow = std::vector<Feature>;

inline void merge_duplicates(SparseRow& row) {
  std::sort(row.begin(), row.end(), [](const Feature& a, const Feature& b) { return a.index < b.index; });
  std::size_t out = 0;
  for (std::size_t i = 0; i < row.size(); ++i) {
    if (out > 0 && row[out - 1].index == row[i].index) {
      row[out - 1].value += row[i].value;
    } else {
      row[out++] = row[i];
    }
  }
  row.resize(out);
}

/// Context fields contribute weight 1 each; tags (when present) contribute
/// 1/|tags| each in the "mv" namespace.
inline SparseRow featurize(const Impression& imp, const TagList* tags, const FeatureHasher& hasher) {
  SparseRow row;
  row.reserve(imp.context.size() + (tags ? tags->tags.size() : 0));
  for (const auto& [field, value] : imp.context) row.push_back({hasher(field, value), 1.0});
  if (tags && !tags->tags.empty()) {
    const double w = 1.0 / static_cast<double>(tags->tags.size());
    for (const auto& t : tags->tags) row.push_back({hasher(kMultiValueField, t), w});
  }
  merge_duplicates(row);
  return row;
}

inline SparseRow featurize(const Impression& imp, const TagList* tags, std::uint32_t hash_dim) {
  return featurize(imp, tags, FeatureHasher(hash_dim));
}

struct SparseData {
  std::vector<SparseRow> rows;
  std::vector<int> labels;
};

inline const TagList* lookup_tags(const FeatureColumn* column, const std::string& doc_id) {
  if (!column) return nullptr;
  auto it = column->values.find(doc_id);
  return it == column->values.end() ? nullptr : &it->second;
}

inline SparseData featurize_all(std::span<const Impression> imps, const FeatureColumn* column,
                                const FeatureHasher& hasher) {
  SparseData out;
  out.rows.reserve(imps.size());
  out.labels.reserve(imps.size());
  for (const auto& imp : imps) {
    out.rows.push_back(featurize(imp, lookup_tags(column, imp.document_id), hasher));
    out.labels.push_back(imp.label);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Model

struct TrainConfig {
  std::uint32_t hash_dim = 1u << 16;
  double learning_rate = 0.05;
  int epochs = 3;
  double l2 = 1e-6;
  std::uint64_t seed = 0;
};

struct CtrModel {
  std::vector<double> weights;
  double bias = 0.0;
  TrainConfig config;
};

inline constexpr double kProbClamp = 1e-6;

inline double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

inline double logit(const CtrModel& m, const SparseRow& row) {
  double z = m.bias;
  for (const auto& f : row) z += m.weights[f.index] * f.value;
  return z;
}

inline double predict(const CtrModel& m, const SparseRow& row) {
  return std::clamp(sigmoid(logit(m, row)), kProbClamp, 1.0 - kProbClamp);
}

inline double predict(const CtrModel& m, const Impression& imp, const TagList* tags) {
  return predict(m, featurize(imp, tags, m.config.hash_dim));
}

inline std::vector<double> predict_all(const CtrModel& m, const SparseData& data) {
  std::vector<double> out;
  out.reserve(data.rows.size());
  for (const auto& r : data.rows) out.push_back(predict(m, r));
  return out;
}

// Mean log-loss on unclamped probabilities plus (l2 / 2) * |w|^2.
inline double objective(const CtrModel& m, const SparseData& data) {
  double loss = 0.0;
  for (std::size_t i = 0; i < data.rows.size(); ++i) {
    const double z = logit(m, data.rows[i]);
    // -log sigma(z) = log1p(exp(-z)), evaluated without overflow.
    const double s = data.labels[i] ? -z : z;
    loss += s > 0 ? s + std::log1p(std::exp(-s)) : std::log1p(std::exp(s));
  }
  double sq = 0.0;
  for (double w : m.weights) sq += w * w;
  return loss / static_cast<double>(data.rows.size()) + 0.5 * m.config.l2 * sq;
}

struct Gradient {
  std::vector<double> weights;
  double bias = 0.0;
};

inline Gradient objective_gradient(const CtrModel& m, const SparseData& data) {
  Gradient g{std::vector<double>(m.weights.size(), 0.0), 0.0};
  const double inv_n = 1.0 / static_cast<double>(data.rows.size());
  for (std::size_t i = 0; i < data.rows.size(); ++i) {
    const double r = (sigmoid(logit(m, data.rows[i])) - data.labels[i]) * inv_n;
    for (const auto& f : data.rows[i]) g.weights[f.index] += r * f.value;
    g.bias += r;
  }
  for (std::size_t j = 0; j < g.weights.size(); ++j) g.weights[j] += m.config.l2 * m.weights[j];
  return g;
}

/// Plain SGD on log-loss with L2 applied to the active weights of each
/// example. The visiting order of every epoch is a seeded shuffle, so equal
/// seeds give bit-identical models. `epoch_loss`, when given, receives the
/// mean training cross-entropy after each epoch.
inline CtrModel train(const SparseData& data, const TrainConfig& cfg,
                      std::vector<double>* epoch_loss = nullptr) {
  if (data.rows.empty()) throw OracleError(OracleError::Kind::InvalidDataset, "empty training set");
  if (!is_power_of_two(cfg.hash_dim)) throw Error("hash_dim must be a power of two >= 2");
  CtrModel m{std::vector<double>(cfg.hash_dim, 0.0), 0.0, cfg};
  std::vector<std::size_t> order(data.rows.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(mix_seed(cfg.seed, 0x5eedULL));

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t i : order) {
      const auto& row = data.rows[i];
      const double g = sigmoid(logit(m, row)) - data.labels[i];
      for (const auto& f : row) {
        double& w = m.weights[f.index];
        w -= cfg.learning_rate * (g * f.value + cfg.l2 * w);
      }
      m.bias -= cfg.learning_rate * g;
    }
    if (!std::isfinite(m.bias) ||
        !std::all_of(m.weights.begin(), m.weights.end(), [](double w) { return std::isfinite(w); })) {
      throw OracleError(OracleError::Kind::NonFinite,
                        "training diverged in epoch " + std::to_string(epoch) +
                            " (learning_rate=" + std::to_string(cfg.learning_rate) + ")");
    }
    if (epoch_loss) epoch_loss->push_back(cross_entropy(predict_all(m, data), data.labels));
  }
  return m;
}

inline CtrModel train(std::span<const Impression> train_set, const FeatureColumn* column,
                      const TrainConfig& cfg) {
  return train(featurize_all(train_set, column, FeatureHasher(cfg.hash_dim)), cfg);
}

// ---------------------------------------------------------------------------
// Relative score

struct OracleConfig {
  TrainConfig train;
  int repeats = 3;
  double eval_fraction = 0.2;
};

struct RepeatResult {
  double baseline_rig = 0.0;
  double extended_rig = 0.0;
};

struct EvalResult {
  double baseline_rig = 0.0;
  double extended_rig = 0.0;
  double relative_score = 0.0;  // mean of per-repeat deltas
  std::vector<RepeatResult> repeats;
  std::int64_t eval_size = 0;
};

/// Scores feature columns against one dataset. Splitting, baseline
/// featurization and baseline models are computed once and reused, so
/// scoring many columns only trains the extended models.
class Oracle {
 public:
  Oracle(const CtrDataset& dataset, OracleConfig cfg)
      : cfg_(cfg), hasher_(cfg.train.hash_dim), split_(temporal_split(dataset, cfg.eval_fraction)) {
    if (cfg_.repeats < 1) throw Error("repeats must be at least 1");
    base_train_ = featurize_all(split_.train, nullptr, hasher_);
    base_eval_ = featurize_all(split_.eval, nullptr, hasher_);
    std::vector<std::future<double>> futures;
    for (int r = 1; r <= cfg_.repeats; ++r) {
      futures.push_back(std::async(std::launch::async, [this, r] {
        return rig(predict_all(train(base_train_, repeat_config(r)), base_eval_), base_eval_.labels);
      }));
    }
    for (auto& f : futures) baseline_.push_back(f.get());
  }

  const OracleConfig& config() const { return cfg_; }
  const Split& split() const { return split_; }

  /// Pass nullptr to score the baseline against itself (delta exactly 0).
  EvalResult score(const FeatureColumn* column) const {
    EvalResult out;
    out.eval_size = static_cast<std::int64_t>(split_.eval.size());
    std::vector<double> extended(static_cast<std::size_t>(cfg_.repeats));
    if (column == nullptr) {
      extended = baseline_;
    } else {
      const SparseData ext_train = featurize_all(split_.train, column, hasher_);
      const SparseData ext_eval = featurize_all(split_.eval, column, hasher_);
      std::vector<std::future<double>> futures;
      for (int r = 1; r <= cfg_.repeats; ++r) {
        futures.push_back(std::async(std::launch::async, [&, r] {
          return rig(predict_all(train(ext_train, repeat_config(r)), ext_eval), ext_eval.labels);
        }));
      }
      for (std::size_t i = 0; i < futures.size(); ++i) extended[i] = futures[i].get();
    }
    double sum_b = 0.0, sum_e = 0.0, sum_d = 0.0;
    for (std::size_t i = 0; i < extended.size(); ++i) {
      out.repeats.push_back({baseline_[i], extended[i]});
      sum_b += baseline_[i];
      sum_e += extended[i];
      sum_d += extended[i] - baseline_[i];
    }
    const double n = static_cast<double>(extended.size());
    out.baseline_rig = sum_b / n;
    out.extended_rig = sum_e / n;
    out.relative_score = sum_d / n;
    return out;
  }

 private:
  TrainConfig repeat_config(int r) const {
    TrainConfig c = cfg_.train;
    c.seed = cfg_.train.seed + static_cast<std::uint64_t>(r);
    return c;
  }

  OracleConfig cfg_;
  FeatureHasher hasher_;
  Split split_;
  SparseData base_train_;
  SparseData base_eval_;
  std::vector<double> baseline_;
};

/// Paired baseline/extended comparison on one temporal split, averaged over
/// `cfg.repeats` seeds.
inline EvalResult relative_score(const CtrDataset& dataset, const FeatureColumn* column,
                                 const OracleConfig& cfg) {
  return Oracle(dataset, cfg).score(column);
}

// ---------------------------------------------------------------------------
// Files

namespace tsv_detail {

inline std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    const auto pos = line.find(sep, start);
    out.push_back(line.substr(start, pos - start));
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  return out;
}

inline std::string strip_cr(std::string s) {
  if (!s.empty() && s.back() == '\r') s.pop_back();
  return s;
}

inline std::vector<std::string> split_tags(const std::string& cell) {
  std::vector<std::string> tags;
  for (auto& t : split(cell, '|')) {
    if (!t.empty()) tags.push_back(std::move(t));
  }
  return tags;
}

}  // namespace tsv_detail

/// Tab-separated: header `time_index label doc_id <fields...>`. A column
/// named "mv" is treated as a `|`-separated tag cell and returned through
/// `mv_column` when provided instead of becoming a context field.
inline CtrDataset read_dataset(const std::filesystem::path& path, FeatureColumn* mv_column = nullptr) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open dataset " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw OracleError(OracleError::Kind::InvalidDataset, "empty dataset file");
  const auto header = tsv_detail::split(tsv_detail::strip_cr(line), '\t');
  if (header.size() < 3 || header[0] != "time_index" || header[1] != "label" || header[2] != "doc_id") {
    throw OracleError(OracleError::Kind::InvalidDataset,
                      "dataset header must start with time_index, label, doc_id");
  }
  CtrDataset ds;
  std::ptrdiff_t mv_col = -1;
  for (std::size_t c = 3; c < header.size(); ++c) {
    if (header[c] == kMultiValueField) {
      mv_col = static_cast<std::ptrdiff_t>(c);
    } else {
      ds.base_fields.push_back(header[c]);
    }
  }
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    line = tsv_detail::strip_cr(line);
    if (line.empty()) continue;
    const auto cells = tsv_detail::split(line, '\t');
    if (cells.size() != header.size()) {
      throw OracleError(OracleError::Kind::InvalidDataset,
                        path.string() + ":" + std::to_string(line_no) + ": expected " +
                            std::to_string(header.size()) + " columns");
    }
    Impression imp;
    try {
      imp.time_index = std::stoll(cells[0]);
      imp.label = std::stoi(cells[1]);
    } catch (const std::exception&) {
      throw OracleError(OracleError::Kind::InvalidDataset,
                        path.string() + ":" + std::to_string(line_no) + ": bad number");
    }
    imp.document_id = cells[2];
    for (std::size_t c = 3; c < cells.size(); ++c) {
      if (static_cast<std::ptrdiff_t>(c) == mv_col) {
        if (mv_column) {
          auto tags = tsv_detail::split_tags(cells[c]);
          mv_column->values.emplace(imp.document_id,
                                    tags.empty() ? TagList::unspecified() : TagList{std::move(tags)});
        }
      } else {
        imp.context.emplace(header[c], cells[c]);
      }
    }
    ds.impressions.push_back(std::move(imp));
  }
  normalize_dataset(ds);
  return ds;
}

inline void write_dataset(const std::filesystem::path& path, const CtrDataset& ds,
                          const FeatureColumn* mv_column = nullptr) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write dataset " + path.string());
  out << "time_index\tlabel\tdoc_id";
  for (const auto& f : ds.base_fields) out << '\t' << f;
  if (mv_column) out << '\t' << kMultiValueField;
  out << '\n';
  for (const auto& imp : ds.impressions) {
    out << imp.time_index << '\t' << imp.label << '\t' << imp.document_id;
    for (const auto& f : ds.base_fields) {
      auto it = imp.context.find(f);
      out << '\t' << (it == imp.context.end() ? "" : it->second);
    }
    if (mv_column) {
      const TagList* tags = lookup_tags(mv_column, imp.document_id);
      out << '\t' << (tags ? join(tags->tags, "|") : std::string(kUnspecified));
    }
    out << '\n';
  }
}

/// Feature column file: `doc_id<TAB>tag|tag|...` per line, with header.
inline void write_column(const std::filesystem::path& path, const FeatureColumn& col) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write column " + path.string());
  out << "doc_id\t" << kMultiValueField << '\n';
  for (const auto& [doc, tags] : col.values) out << doc << '\t' << join(tags.tags, "|") << '\n';
}

inline FeatureColumn read_column(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open column " + path.string());
  FeatureColumn col;
  std::string line;
  std::getline(in, line);  // header
  std::size_t covered = 0;
  while (std::getline(in, line)) {
    line = tsv_detail::strip_cr(line);
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw Error("column line without tab in " + path.string());
    auto tags = tsv_detail::split_tags(line.substr(tab + 1));
    TagList list = tags.empty() ? TagList::unspecified() : TagList{std::move(tags)};
    if (!list.is_unspecified()) ++covered;
    col.values.emplace(line.substr(0, tab), std::move(list));
  }
  if (!col.values.empty()) col.coverage = static_cast<double>(covered) / static_cast<double>(col.values.size());
  return col;
}

}  // namespace featureloop

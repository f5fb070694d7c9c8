#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "featureloop/core.hpp"
#include "featureloop/memory.hpp"

namespace featureloop {

inline constexpr std::size_t kEmbeddingDim = 256;

// Row-major n x d matrix.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}
  double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
};

/// Hashed character 3-gram counts, l2-normalized. The text is padded with
/// two start markers and one end marker so every string, including the
/// empty one, yields at least one 3-gram.
inline std::vector<double> embed_text(std::string_view text, std::size_t dim = kEmbeddingDim) {
  std::string padded = "\x02\x02";
  padded += text;
  padded += '\x03';
  std::vector<double> v(dim, 0.0);
  for (std::size_t i = 0; i + 3 <= padded.size(); ++i) {
    std::uint32_t h = 2166136261u;
    for (std::size_t k = 0; k < 3; ++k) {
      h ^= static_cast<unsigned char>(padded[i + k]);
      h *= 16777619u;
    }
    v[h % dim] += 1.0;
  }
  double norm = 0.0;
  for (double x : v) norm += x * x;
  norm = std::sqrt(norm);
  for (double& x : v) x /= norm;
  return v;
}

using Embedder = std::function<std::vector<double>(std::string_view)>;

inline Matrix embed_prompts(const std::vector<std::string>& prompts, const Embedder& embedder = {}) {
  if (prompts.empty()) throw Error("embed_prompts needs at least one prompt");
  std::vector<std::vector<double>> rows;
  rows.reserve(prompts.size());
  for (const auto& p : prompts) rows.push_back(embedder ? embedder(p) : embed_text(p));
  Matrix m(rows.size(), rows.front().size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != m.cols) throw Error("embedder returned rows of different widths");
    std::copy(rows[i].begin(), rows[i].end(), m.data.begin() + static_cast<std::ptrdiff_t>(i * m.cols));
  }
  return m;
}

struct Projection {
  std::vector<std::pair<double, double>> points;
  std::vector<double> mean;
  std::vector<double> axis_x;  // unit length, or all zero when absent
  std::vector<double> axis_y;
  bool rank_deficient = false;
};

namespace pca_detail {

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double normalize(std::vector<double>& v) {
  const double n = std::sqrt(dot(v, v));
  if (n > 0) {
    for (double& x : v) x /= n;
  }
  return n;
}

// w = X^T (X v) for the centered matrix.
inline std::vector<double> gram_apply(const Matrix& x, const std::vector<double>& v) {
  std::vector<double> w(x.cols, 0.0);
  for (std::size_t i = 0; i < x.rows; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < x.cols; ++j) s += x(i, j) * v[j];
    for (std::size_t j = 0; j < x.cols; ++j) w[j] += s * x(i, j);
  }
  return w;
}

inline void orthogonalize(std::vector<double>& v, const std::vector<double>& against) {
  const double p = dot(v, against);
  for (std::size_t j = 0; j < v.size(); ++j) v[j] -= p * against[j];
}

// Makes the largest-magnitude loading positive.
inline void fix_sign(std::vector<double>& v) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < v.size(); ++j) {
    if (std::abs(v[j]) > std::abs(v[best])) best = j;
  }
  if (v[best] < 0) {
    for (double& x : v) x = -x;
  }
}

// Power iteration from a fixed start, optionally deflated against `prior`.
inline std::vector<double> leading_axis(const Matrix& x, const std::vector<double>* prior,
                                        double scale) {
  constexpr int kIterations = 100;
  constexpr double kTolerance = 1e-9;
  std::vector<double> v(x.cols);
  for (std::size_t j = 0; j < x.cols; ++j) v[j] = 1.0 + 0.5 * std::sin(static_cast<double>(j) + 1.0);
  if (prior) orthogonalize(v, *prior);
  if (normalize(v) == 0.0) return std::vector<double>(x.cols, 0.0);
  for (int it = 0; it < kIterations; ++it) {
    std::vector<double> w = gram_apply(x, v);
    if (prior) orthogonalize(w, *prior);
    if (normalize(w) <= kTolerance * scale) return std::vector<double>(x.cols, 0.0);
    double diff = 0.0;
    for (std::size_t j = 0; j < w.size(); ++j) diff = std::max(diff, std::abs(w[j] - v[j]));
    v = std::move(w);
    if (diff < kTolerance) break;
  }
  return v;
}

}  // namespace pca_detail

/// Principal-component projection onto the top two axes. When every row is
/// identical all points land on the origin and `rank_deficient` is set.
inline Projection project_2d(const Matrix& m) {
  if (m.rows < 2) throw Error("project_2d needs at least two rows");
  Projection p;
  p.mean.assign(m.cols, 0.0);
  for (std::size_t i = 0; i < m.rows; ++i) {
    for (std::size_t j = 0; j < m.cols; ++j) p.mean[j] += m(i, j);
  }
  for (double& x : p.mean) x /= static_cast<double>(m.rows);
  Matrix centered(m.rows, m.cols);
  double total = 0.0;
  for (std::size_t i = 0; i < m.rows; ++i) {
    for (std::size_t j = 0; j < m.cols; ++j) {
      centered(i, j) = m(i, j) - p.mean[j];
      total += centered(i, j) * centered(i, j);
    }
  }
  p.points.assign(m.rows, {0.0, 0.0});
  if (total <= 1e-24) {
    p.rank_deficient = true;
    p.axis_x.assign(m.cols, 0.0);
    p.axis_y.assign(m.cols, 0.0);
    return p;
  }
  p.axis_x = pca_detail::leading_axis(centered, nullptr, total);
  p.axis_y = pca_detail::leading_axis(centered, &p.axis_x, total);
  pca_detail::fix_sign(p.axis_x);
  if (pca_detail::dot(p.axis_y, p.axis_y) > 0) pca_detail::fix_sign(p.axis_y);
  for (std::size_t i = 0; i < m.rows; ++i) {
    double x = 0.0, y = 0.0;
    for (std::size_t j = 0; j < m.cols; ++j) {
      x += centered(i, j) * p.axis_x[j];
      y += centered(i, j) * p.axis_y[j];
    }
    p.points[i] = {x, y};
  }
  return p;
}

struct HistogramBin {
  double low;
  double high;
  std::size_t count;
};

/// Equal-width bins over [min, max] of the ok scores in scope (one agent, or
/// all when `agent` is empty). Bins are right-open except the last.
inline std::vector<HistogramBin> score_histogram(const std::vector<ScoreRecord>& records,
                                                 const std::string& agent, std::size_t n_bins) {
  if (n_bins < 1) throw Error("histogram needs at least one bin");
  std::vector<double> scores;
  for (const auto& r : records) {
    if (r.status == Status::ok && (agent.empty() || r.agent_id == agent)) scores.push_back(r.relative_score);
  }
  if (scores.empty()) return {};
  const auto [lo_it, hi_it] = std::minmax_element(scores.begin(), scores.end());
  const double lo = *lo_it, hi = *hi_it;
  std::vector<double> edges(n_bins + 1);
  for (std::size_t i = 0; i <= n_bins; ++i) {
    edges[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n_bins);
  }
  edges.back() = hi;
  std::vector<HistogramBin> bins;
  for (std::size_t i = 0; i < n_bins; ++i) bins.push_back({edges[i], edges[i + 1], 0});
  for (double s : scores) {
    // First edge strictly above s, clamped into the last bin.
    const auto it = std::upper_bound(edges.begin(), edges.end() - 1, s);
    auto idx = static_cast<std::size_t>(it - edges.begin());
    idx = std::clamp<std::size_t>(idx, 1, n_bins) - 1;
    ++bins[idx].count;
  }
  return bins;
}

struct ProjectedPrompt {
  std::string prompt_id;
  std::string agent_id;
  double relative_score;
  std::string prompt_text;
  double x = 0.0;
  double y = 0.0;
};

/// Distinct ok prompts in memory order, each with its best score and the
/// agent that first evaluated it.
inline std::vector<ProjectedPrompt> distinct_prompts(const std::vector<ScoreRecord>& records) {
  std::vector<ProjectedPrompt> out;
  std::unordered_map<std::string, std::size_t> index;
  for (const auto& r : records) {
    if (r.status != Status::ok) continue;
    auto [it, inserted] = index.emplace(r.prompt_id, out.size());
    if (inserted) {
      out.push_back({r.prompt_id, r.agent_id, r.relative_score, r.prompt_text});
    } else {
      out[it->second].relative_score = std::max(out[it->second].relative_score, r.relative_score);
    }
  }
  return out;
}

struct PromptMap {
  std::vector<ProjectedPrompt> prompts;
  Matrix embeddings;
  bool rank_deficient = false;
};

inline PromptMap project_memory(const std::vector<ScoreRecord>& records) {
  PromptMap map;
  map.prompts = distinct_prompts(records);
  if (map.prompts.empty()) return map;
  std::vector<std::string> texts;
  for (const auto& p : map.prompts) texts.push_back(p.prompt_text);
  map.embeddings = embed_prompts(texts);
  if (map.prompts.size() < 2) {
    map.rank_deficient = true;
    return map;
  }
  const Projection proj = project_2d(map.embeddings);
  map.rank_deficient = proj.rank_deficient;
  for (std::size_t i = 0; i < map.prompts.size(); ++i) {
    map.prompts[i].x = proj.points[i].first;
    map.prompts[i].y = proj.points[i].second;
  }
  return map;
}

/// `prompt_id agent_id score v0 .. v<d-1>`, tab-separated, with header.
inline void write_embedding_matrix(const std::filesystem::path& path, const PromptMap& map) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out.precision(17);
  out << "prompt_id\tagent_id\tscore";
  for (std::size_t j = 0; j < map.embeddings.cols; ++j) out << "\tv" << j;
  out << '\n';
  for (std::size_t i = 0; i < map.prompts.size(); ++i) {
    out << map.prompts[i].prompt_id << '\t' << map.prompts[i].agent_id << '\t' << map.prompts[i].relative_score;
    for (std::size_t j = 0; j < map.embeddings.cols; ++j) out << '\t' << map.embeddings(i, j);
    out << '\n';
  }
}

inline void write_projection(const std::filesystem::path& path, const PromptMap& map) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out.precision(17);
  out << "prompt_id\tagent_id\tscore\tx\ty\n";
  for (const auto& p : map.prompts) {
    out << p.prompt_id << '\t' << p.agent_id << '\t' << p.relative_score << '\t' << p.x << '\t' << p.y << '\n';
  }
}

}  // namespace featureloop

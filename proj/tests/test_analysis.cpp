#include <gtest/gtest.h>

#include <numeric>

#include "featureloop/analysis.hpp"
#include "featureloop/random.hpp"
#include "test_util.hpp"

using namespace featureloop;

namespace {

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);  // rows are unit length
}

Matrix from_rows(const std::vector<std::vector<double>>& rows) {
  Matrix m(rows.size(), rows.front().size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < m.cols; ++j) m(i, j) = rows[i][j];
  }
  return m;
}

double distance(std::pair<double, double> a, std::pair<double, double> b) {
  return std::hypot(a.first - b.first, a.second - b.second);
}

}  // namespace

TEST(Embed, UnitNormAndDeterministic) {
  for (const std::string s : {"", "a", "hello world", "Extract the topics {raw_text}"}) {
    const auto v = embed_text(s);
    ASSERT_EQ(v.size(), kEmbeddingDim);
    EXPECT_NEAR(cosine(v, v), 1.0, 1e-12) << s;
    EXPECT_EQ(v, embed_text(s));
  }
}

TEST(Embed, SharedTrigramsRaiseSimilarity) {
  EXPECT_GT(cosine(embed_text("abc abc"), embed_text("abc")), cosine(embed_text("abc"), embed_text("xyz")));
  EXPECT_GT(cosine(embed_text("extract topics {raw_text}"), embed_text("extract topic {raw_text}")),
            cosine(embed_text("extract topics {raw_text}"), embed_text("summarize sentiment")));
}

TEST(Embed, IdenticalPromptsGiveIdenticalRows) {
  const auto m = embed_prompts({"same {raw_text}", "other {raw_text}", "same {raw_text}"});
  for (std::size_t j = 0; j < m.cols; ++j) EXPECT_EQ(m(0, j), m(2, j));
  EXPECT_THROW(embed_prompts({}), Error);
}

TEST(Project, TwoPointsKeepTheirDistance) {
  const Matrix m = from_rows({{1, 2, 3, 4}, {4, 0, -1, 2}});
  const auto p = project_2d(m);
  const double d = std::sqrt(9.0 + 4 + 16 + 4);
  EXPECT_NEAR(distance(p.points[0], p.points[1]), d, 1e-9);
  EXPECT_FALSE(p.rank_deficient);
}

TEST(Project, PlantedPlaneIsReconstructed) {
  Rng rng(11);
  const std::size_t d = 40;
  std::vector<double> u(d), v(d), c(d);
  for (std::size_t j = 0; j < d; ++j) {
    u[j] = (rng.uniform() * 2 - 1);
    v[j] = (rng.uniform() * 2 - 1);
    c[j] = (rng.uniform() * 2 - 1);
  }
  std::vector<std::vector<double>> rows;
  for (int i = 0; i < 60; ++i) {
    const double a = 3 * (rng.uniform() * 2 - 1), b = (rng.uniform() * 2 - 1);
    std::vector<double> r(d);
    for (std::size_t j = 0; j < d; ++j) r[j] = c[j] + a * u[j] + b * v[j];
    rows.push_back(r);
  }
  const auto p = project_2d(from_rows(rows));
  EXPECT_NEAR(cosine(p.axis_x, p.axis_x), 1.0, 1e-9);
  EXPECT_NEAR(cosine(p.axis_y, p.axis_y), 1.0, 1e-9);
  EXPECT_NEAR(cosine(p.axis_x, p.axis_y), 0.0, 1e-9);
  double worst = 0.0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      const double rec = p.mean[j] + p.points[i].first * p.axis_x[j] + p.points[i].second * p.axis_y[j];
      worst = std::max(worst, std::abs(rec - rows[i][j]));
    }
  }
  EXPECT_LT(worst, 1e-6);
}

TEST(Project, FirstAxisCarriesMostVariance) {
  const Matrix m = from_rows({{-10, 0, 0}, {10, 0, 0}, {0, 1, 0}, {0, -1, 0}});
  const auto p = project_2d(m);
  EXPECT_NEAR(std::abs(p.axis_x[0]), 1.0, 1e-6);
  EXPECT_NEAR(std::abs(p.axis_y[1]), 1.0, 1e-6);
}

TEST(Project, IdenticalRowsAreRankDeficient) {
  const auto m = embed_prompts({"x {raw_text}", "x {raw_text}", "x {raw_text}"});
  const auto p = project_2d(m);
  EXPECT_TRUE(p.rank_deficient);
  for (const auto& pt : p.points) {
    EXPECT_EQ(pt.first, 0.0);
    EXPECT_EQ(pt.second, 0.0);
  }
  EXPECT_THROW(project_2d(Matrix(1, 3)), Error);
}

TEST(Project, RowOrderDoesNotMatter) {
  std::vector<std::string> prompts;
  for (int i = 0; i < 12; ++i) prompts.push_back("prompt variant " + std::to_string(i * i) + " {raw_text}");
  const auto base = project_2d(embed_prompts(prompts));
  std::vector<std::size_t> perm(prompts.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::reverse(perm.begin(), perm.end());
  std::swap(perm[0], perm[5]);
  std::vector<std::string> shuffled;
  for (auto k : perm) shuffled.push_back(prompts[k]);
  const auto moved = project_2d(embed_prompts(shuffled));
  for (std::size_t i = 0; i < perm.size(); ++i) {
    EXPECT_NEAR(moved.points[i].first, base.points[perm[i]].first, 1e-6);
    EXPECT_NEAR(moved.points[i].second, base.points[perm[i]].second, 1e-6);
  }
}

TEST(Histogram, SmallExample) {
  std::vector<ScoreRecord> recs{fltest::scored(0.0, "a {raw_text}"), fltest::scored(0.5, "b {raw_text}"),
                                fltest::scored(1.0, "c {raw_text}")};
  const auto bins = score_histogram(recs, "", 2);
  ASSERT_EQ(bins.size(), 2u);
  EXPECT_EQ(bins[0].count, 1u);
  EXPECT_EQ(bins[1].count, 2u);
  EXPECT_EQ(bins[0].low, 0.0);
  EXPECT_EQ(bins[1].high, 1.0);
  EXPECT_TRUE(score_histogram({}, "", 3).empty());
  EXPECT_THROW(score_histogram(recs, "", 0), Error);
}

TEST(Histogram, SingleValueFallsInOneBin) {
  std::vector<ScoreRecord> recs{fltest::scored(0.2, "a {raw_text}"), fltest::scored(0.2, "b {raw_text}")};
  const auto bins = score_histogram(recs, "", 4);
  std::size_t total = 0;
  for (const auto& b : bins) total += b.count;
  EXPECT_EQ(total, 2u);
}

TEST(Histogram, MatchesBruteForceBinning) {
  Rng rng(3);
  std::vector<ScoreRecord> recs;
  for (int i = 0; i < 1000; ++i) {
    // Coarse values so many land exactly on bin edges.
    recs.push_back(fltest::scored(static_cast<double>(rng.below(41)) / 40.0 - 0.5, "p" + std::to_string(i) + " {raw_text}"));
  }
  auto failed = fltest::scored(99.0, "failed {raw_text}");
  failed.status = Status::eval_failed;
  recs.push_back(failed);
  const std::size_t n = 8;
  const auto bins = score_histogram(recs, "", n);
  std::vector<std::size_t> expected(n, 0);
  for (std::size_t i = 0; i + 1 < recs.size(); ++i) {
    const double s = recs[i].relative_score;
    std::size_t k = 0;
    while (k + 1 < n && s >= bins[k + 1].low) ++k;
    ++expected[k];
  }
  std::size_t total = 0;
  for (std::size_t k = 0; k < n; ++k) {
    EXPECT_EQ(bins[k].count, expected[k]) << k;
    total += bins[k].count;
  }
  EXPECT_EQ(total, 1000u);
  EXPECT_EQ(bins.front().low, -0.5);
  EXPECT_EQ(bins.back().high, 0.5);
}

TEST(Histogram, PerAgentCountsSumToTotal) {
  Rng rng(9);
  std::vector<ScoreRecord> recs;
  for (int i = 0; i < 300; ++i) {
    recs.push_back(fltest::scored((rng.uniform() * 2 - 1), "p" + std::to_string(i) + " {raw_text}", "a" + std::to_string(i % 4)));
  }
  auto count = [](const std::vector<HistogramBin>& bins) {
    std::size_t n = 0;
    for (const auto& b : bins) n += b.count;
    return n;
  };
  std::size_t sum = 0;
  for (int a = 0; a < 4; ++a) sum += count(score_histogram(recs, "a" + std::to_string(a), 10));
  EXPECT_EQ(sum, count(score_histogram(recs, "", 10)));
  EXPECT_EQ(count(score_histogram(recs, "a1", 10)), 75u);
}

TEST(PromptMap, DistinctPromptsKeepBestScoreAndFirstAgent) {
  std::vector<ScoreRecord> recs{fltest::scored(0.1, "x {raw_text}", "a1"), fltest::scored(0.3, "x {raw_text}", "a2"),
                                fltest::scored(0.2, "y {raw_text}", "a2")};
  auto failed = fltest::scored(0.0, "z {raw_text}");
  failed.status = Status::extraction_failed;
  recs.push_back(failed);
  const auto map = project_memory(recs);
  ASSERT_EQ(map.prompts.size(), 2u);
  EXPECT_EQ(map.prompts[0].agent_id, "a1");
  EXPECT_EQ(map.prompts[0].relative_score, 0.3);
  EXPECT_EQ(map.embeddings.rows, 2u);
  EXPECT_FALSE(map.rank_deficient);
  EXPECT_TRUE(project_memory({recs[0]}).rank_deficient);
  EXPECT_TRUE(project_memory({}).prompts.empty());
}

TEST(PromptMap, WritesTables) {
  fltest::TempDir dir;
  std::vector<ScoreRecord> recs{fltest::scored(0.1, "x {raw_text}"), fltest::scored(0.2, "y {raw_text}"),
                                fltest::scored(0.3, "w {raw_text}")};
  const auto map = project_memory(recs);
  write_embedding_matrix(dir / "e.tsv", map);
  write_projection(dir / "p.tsv", map);
  const auto e = fltest::slurp(dir / "e.tsv");
  const auto p = fltest::slurp(dir / "p.tsv");
  EXPECT_EQ(std::count(e.begin(), e.end(), '\n'), 4);
  EXPECT_EQ(std::count(p.begin(), p.end(), '\n'), 4);
  EXPECT_TRUE(p.starts_with("prompt_id\tagent_id\tscore\tx\ty\n"));
  const auto header = e.substr(0, e.find('\n'));
  EXPECT_EQ(std::count(header.begin(), header.end(), '\t'), static_cast<long>(2 + kEmbeddingDim));
}

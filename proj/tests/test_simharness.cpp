#include <gtest/gtest.h>

#include "featureloop/architect.hpp"
#include "featureloop/simharness.hpp"
#include "test_util.hpp"

using namespace featureloop;
using namespace featureloop::sim;

namespace {

const std::string kAllKeywords =
    "List the topic, entity, audience, intent, sentiment, geography and priority tags; deduplicate them. {raw_text}";

std::shared_ptr<const World> small_world(std::uint64_t seed = 1) {
  WorldSpec spec;
  spec.seed = seed;
  spec.n_docs = 200;
  spec.n_impressions = 5000;
  return std::make_shared<const World>(gen_world(spec));
}

std::string sentinel_reply(const World& w, std::size_t doc, const std::string& prompt, std::uint64_t seed = 1) {
  ChatRequest req;
  req.user = ground(validate_template(prompt), w.corpus[doc]);
  return sim_sentinel_behavior(std::shared_ptr<const World>(&w, [](const World*) {}))(seed, req);
}

std::string instruction_with_best(const std::string& best) {
  FeedbackContext ctx;
  ctx.best = {{0.05, best}};
  ctx.worst = {{0.05, best}};
  return build_instruction(best, render_context_block(ctx));
}

}  // namespace

TEST(GenWorld, DeterministicPerSeed) {
  const auto a = small_world(3);
  const auto b = small_world(3);
  ASSERT_EQ(a->corpus.size(), b->corpus.size());
  for (std::size_t i = 0; i < a->corpus.size(); ++i) EXPECT_EQ(a->corpus[i].raw_text, b->corpus[i].raw_text);
  for (std::size_t i = 0; i < a->dataset.impressions.size(); ++i) {
    EXPECT_EQ(a->dataset.impressions[i].label, b->dataset.impressions[i].label);
  }
  EXPECT_EQ(a->truth.values, b->truth.values);
  EXPECT_NE(small_world(4)->corpus[0].raw_text, a->corpus[0].raw_text);
}

TEST(GenWorld, DocumentsEmbedTheirTopics) {
  const auto w = small_world();
  for (std::size_t d = 0; d < w->corpus.size(); ++d) {
    const auto& tags = w->truth.values.at(w->corpus[d].id);
    for (const auto& t : tags.tags) EXPECT_NE(w->corpus[d].raw_text.find(t), std::string::npos);
    EXPECT_TRUE(is_valid(tags));
  }
}

TEST(GenWorld, ZeroLiftCtrMatchesBaseRate) {
  WorldSpec spec;
  spec.topic_lift.assign(12, 0.0);
  spec.publisher_lift_scale = 0.0;  // labels then depend on the base rate only (plus a tiny device offset)
  const auto w = gen_world(spec);
  double clicks = 0;
  for (const auto& imp : w.dataset.impressions) clicks += imp.label;
  const double n = static_cast<double>(w.dataset.impressions.size());
  const double sigma = std::sqrt(spec.base_ctr * (1 - spec.base_ctr) / n);
  EXPECT_NEAR(clicks / n, spec.base_ctr, 3 * sigma);
}

TEST(GenWorld, TruthColumnCarriesSignal) {
  const auto w = gen_world(WorldSpec{});
  EXPECT_GT(relative_score(w.dataset, &w.truth, OracleConfig{}).relative_score, 0.01);
}

TEST(GenWorld, SpecValidation) {
  WorldSpec s;
  s.keyword_set.clear();
  EXPECT_THROW(gen_world(s), Error);
  s = WorldSpec{};
  s.base_ctr = 1.0;
  EXPECT_THROW(gen_world(s), Error);
  s = WorldSpec{};
  s.topic_lift = {1.0};
  EXPECT_THROW(gen_world(s), Error);
}

TEST(Fidelity, KeywordFractionAndLengthPenalty) {
  const auto kw = default_keywords();
  EXPECT_EQ(prompt_fidelity(kAllKeywords, kw), 1.0);
  EXPECT_EQ(prompt_fidelity("Nothing relevant {raw_text}", kw), 0.0);
  EXPECT_DOUBLE_EQ(prompt_fidelity("topic and entity {raw_text}", kw), 0.25);
  std::string longer = kAllKeywords;
  for (int i = 0; i < 300; ++i) longer += " filler";
  EXPECT_LT(prompt_fidelity(longer, kw), 1.0);
  EXPECT_GT(prompt_fidelity(longer, kw), 0.0);
}

TEST(Fidelity, AddingAKeywordNeverLowersIt) {
  const auto kw = default_keywords();
  Rng rng(5);
  for (int i = 0; i < 300; ++i) {
    std::string prompt = "{raw_text}";
    for (std::uint64_t k = 0; k < rng.below(30); ++k) prompt += rng.bernoulli(0.3) ? " " + kw[rng.below(kw.size())] : " word";
    const double before = prompt_fidelity(prompt, kw);
    EXPECT_GE(prompt_fidelity(kw[rng.below(kw.size())] + " " + prompt, kw), before);
  }
}

TEST(SimSentinel, FullFidelityReturnsTruth) {
  const auto w = small_world();
  for (std::size_t d = 0; d < 50; ++d) {
    EXPECT_EQ(parse_tags(sentinel_reply(*w, d, kAllKeywords)), w->truth.values.at(w->corpus[d].id));
  }
}

TEST(SimSentinel, ZeroFidelityReturnsNoiseOnly) {
  const auto w = small_world();
  for (std::size_t d = 0; d < 50; ++d) {
    const auto tags = parse_tags(sentinel_reply(*w, d, "Describe it {raw_text}"));
    for (const auto& t : tags.tags) EXPECT_TRUE(t.rfind("noise", 0) == 0 || t == kUnspecified) << t;
  }
}

TEST(SimSentinel, DeterministicAndParseable) {
  const auto w = small_world();
  for (std::size_t d = 0; d < 100; ++d) {
    const auto reply = sentinel_reply(*w, d, "Give the topic and intent. {raw_text}");
    EXPECT_EQ(reply, sentinel_reply(*w, d, "Give the topic and intent. {raw_text}"));
    EXPECT_TRUE(is_valid(parse_tags(reply)));
  }
}

TEST(SimSentinel, UngroundedRequestIsUnspecified) {
  const auto w = small_world();
  ChatRequest req;
  req.user = "no document here";
  EXPECT_EQ(sim_sentinel_behavior(w)(1, req), "unspecified");
}

TEST(SimArchitect, ReadsBestPromptFromContext) {
  EXPECT_EQ(prompt_to_mutate(instruction_with_best("Best one {raw_text}")), "Best one {raw_text}");
  EXPECT_EQ(prompt_to_mutate(build_instruction("Base {raw_text}", kEmptyContext)), "Base {raw_text}");
  FeedbackContext ctx;
  ctx.best = {{0.2, "First\nmultiline {raw_text}"}, {0.1, "Second {raw_text}"}};
  EXPECT_EQ(prompt_to_mutate(build_instruction("x", render_context_block(ctx))), "First\nmultiline {raw_text}");
}

TEST(SimArchitect, AddsOneMissingKeywordOrPrunes) {
  const auto w = small_world();
  const auto kw = w->spec.keyword_set;
  const std::string best = "Find the topic, entity, audience, intent, sentiment and geography. Be brief. {raw_text}";
  const auto instruction = instruction_with_best(best);
  int added = 0;
  for (std::uint64_t seed = 0; seed < 60; ++seed) {
    ChatRequest req;
    req.user = instruction;
    const auto out = sim_architect_behavior(w)(seed, req);
    EXPECT_EQ(count_occurrences(out, kPlaceholder), 1u);
    const auto gained = keywords_present(out, kw) - keywords_present(best, kw);
    if (gained == 1) {
      ++added;
      EXPECT_TRUE(out.ends_with(best));
      EXPECT_TRUE(out.find("priority") != std::string::npos || out.find("deduplicate") != std::string::npos);
    } else {
      EXPECT_EQ(gained, 0u);
      EXPECT_EQ(out, "Find the topic, entity, audience, intent, sentiment and geography. {raw_text}");
    }
  }
  EXPECT_GT(added, 30);
  EXPECT_LT(added, 55);
}

TEST(SimArchitect, MaximalPromptOnlyGetsPruned) {
  const auto w = small_world();
  const std::string best = "Keep it short. " + kAllKeywords + " Thanks.";
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    ChatRequest req;
    req.user = instruction_with_best(best);
    const auto out = sim_architect_behavior(w)(seed, req);
    EXPECT_EQ(keywords_present(out, w->spec.keyword_set), w->spec.keyword_set.size());
    EXPECT_LT(out.size(), best.size());
    EXPECT_EQ(count_occurrences(out, kPlaceholder), 1u);
  }
}

TEST(SimArchitect, PlaceholderSurvivesRandomPrompts) {
  const auto w = small_world();
  Rng rng(17);
  const std::vector<std::string> pieces{"Do this.", "topic first.", "Then that.", "{raw_text}", "Be exact."};
  for (int i = 0; i < 200; ++i) {
    std::vector<std::string> parts;
    bool has = false;
    for (std::uint64_t k = 0; k < 1 + rng.below(6); ++k) {
      auto p = pieces[rng.below(pieces.size())];
      if (p == "{raw_text}" && has) continue;
      has = has || p == "{raw_text}";
      parts.push_back(p);
    }
    if (!has) parts.push_back("{raw_text}");
    ChatRequest req;
    req.user = instruction_with_best(join(parts, " "));
    EXPECT_EQ(count_occurrences(sim_architect_behavior(w)(rng.next(), req), kPlaceholder), 1u);
  }
}

TEST(Files, SpecCorpusAndWorldRoundTrip) {
  fltest::TempDir dir;
  WorldSpec spec;
  spec.seed = 9;
  spec.n_docs = 50;
  spec.n_impressions = 400;
  spec.topic_lift = std::vector<double>(12, 0.25);
  const auto w = gen_world(spec);
  const auto files = write_world(dir.path(), w);
  const auto spec2 = read_spec(files.spec);
  EXPECT_EQ(spec2.seed, 9u);
  EXPECT_EQ(spec2.topic_lift, spec.topic_lift);
  EXPECT_EQ(spec2.keyword_set, spec.keyword_set);
  const auto corpus = read_corpus(files.corpus);
  ASSERT_EQ(corpus.size(), w.corpus.size());
  EXPECT_EQ(corpus[3].raw_text, w.corpus[3].raw_text);
  EXPECT_EQ(read_dataset(files.dataset).impressions.size(), 400u);
  EXPECT_EQ(read_column(files.truth).values, w.truth.values);
  EXPECT_EQ(gen_world(spec2).corpus[7].raw_text, w.corpus[7].raw_text);
}

TEST(Files, UnknownSpecKeyIsRejected) {
  fltest::TempDir dir;
  fltest::spit(dir / "world.cfg", "seed=1\nbogus=2\n");
  EXPECT_THROW(read_spec(dir / "world.cfg"), Error);
}

TEST(KnownOptimum, AllKeywordPromptDominatesOverTenSeeds) {
  int wins = 0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    WorldSpec spec;
    spec.seed = seed;
    spec.n_impressions = 20000;
    const auto w = std::make_shared<const World>(gen_world(spec));
    const Oracle oracle(w->dataset, OracleConfig{});
    auto score = [&](const std::string& prompt) {
      auto backend = simulated_backend(seed, sim_sentinel_behavior(w));
      ExtractionCache cache;
      const auto col = extract_corpus(validate_template(prompt), w->corpus, *backend, cache);
      return oracle.score(&col).relative_score;
    };
    wins += score(kAllKeywords) > score("Describe the text. {raw_text}");
  }
  EXPECT_EQ(wins, 10);
}

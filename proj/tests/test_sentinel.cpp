#include <gtest/gtest.h>

#include "featureloop/random.hpp"
#include "featureloop/sentinel.hpp"
#include "test_util.hpp"

using namespace featureloop;

namespace {

std::vector<std::string> tags_of(std::string_view raw) { return parse_tags(raw).tags; }

std::vector<Document> docs(int n, const std::string& prefix = "doc") {
  std::vector<Document> out;
  for (int i = 0; i < n; ++i) out.push_back(make_document(prefix + " number " + std::to_string(i)));
  return out;
}

// Emits two tags derived from the grounded text.
Behavior tagging_behavior() {
  return [](std::uint64_t seed, const ChatRequest& r) {
    const auto h = hash_bytes(r.user) ^ seed;
    return "tag" + std::to_string(h % 7) + ", tag" + std::to_string((h >> 8) % 5 + 10);
  };
}

// Fails for requests whose text contains "number <i>" with i in `bad`.
Behavior failing_for(std::set<int> bad) {
  return [bad](std::uint64_t, const ChatRequest& r) -> std::string {
    for (int i : bad) {
      if (r.user.find("number " + std::to_string(i) + " ") != std::string::npos ||
          r.user.ends_with("number " + std::to_string(i))) {
        throw LlmError(LlmError::Kind::Transport, "injected");
      }
    }
    return "ok";
  };
}

}  // namespace

TEST(Ground, SubstitutesOnce) {
  const auto t = validate_template("T: {raw_text}");
  EXPECT_EQ(ground(t, make_document("abc")), "T: abc");
  EXPECT_EQ(ground(t, make_document("x {raw_text} y")), "T: x {raw_text} y");
}

TEST(Ground, SeedTemplateWrapsDocument) {
  const auto t = validate_template(kSeedUserTemplate);
  const auto g = ground(t, make_document("DOCUMENT BODY"));
  const auto open = g.find("<begin raw text input>");
  ASSERT_NE(open, std::string::npos);
  EXPECT_LT(open, g.find("DOCUMENT BODY"));
  EXPECT_NE(g.find("Extract up to ten comma-separated pieces"), std::string::npos);
}

TEST(ParseTags, TenTagExampleLine) {
  EXPECT_EQ(tags_of("create account, log in, donate, chatgpt, auto-gpt, waymo, camel, carcraft, "
                    "multi-agent reinforcement learning, jade"),
            (std::vector<std::string>{"create account", "log in", "donate", "chatgpt", "auto-gpt", "waymo",
                                      "camel", "carcraft", "multi-agent reinforcement learning", "jade"}));
}

TEST(ParseTags, EdgeCases) {
  EXPECT_EQ(tags_of(""), std::vector<std::string>{"unspecified"});
  EXPECT_EQ(tags_of("a, A, a "), std::vector<std::string>{"a"});
  EXPECT_EQ(tags_of("\n\n  first,  line  \nsecond"), (std::vector<std::string>{"first", "line"}));
  EXPECT_EQ(tags_of(" , ,, "), std::vector<std::string>{"unspecified"});
  EXPECT_EQ(tags_of("one two three four five six, one two three four five six seven"),
            std::vector<std::string>{"one two three four five six"});
  EXPECT_EQ(tags_of("b, a, c"), (std::vector<std::string>{"b", "a", "c"}));
  EXPECT_EQ(tags_of("x\t\ty,  z"), (std::vector<std::string>{"x y", "z"}));
  EXPECT_EQ(tags_of("unspecified"), std::vector<std::string>{"unspecified"});
}

TEST(ParseTags, TruncatesToTenAgainstSplitOracle) {
  std::string line;
  std::vector<std::string> expected;
  for (int i = 1; i <= 11; ++i) {
    line += (i > 1 ? ", t" : "t") + std::to_string(i);
    if (i <= 10) expected.push_back("t" + std::to_string(i));
  }
  EXPECT_EQ(tags_of(line), expected);
}

TEST(ParseTags, FuzzedOutputsAlwaysValidAndIdempotent) {
  Rng rng(2024);
  const std::string alphabet = "abcXYZ ,,\n\t-'\"{}0123456789";
  for (int i = 0; i < 2000; ++i) {
    std::string raw;
    const auto len = rng.below(200);
    for (std::uint64_t k = 0; k < len; ++k) raw += alphabet[rng.below(alphabet.size())];
    const auto parsed = parse_tags(raw);
    ASSERT_TRUE(is_valid(parsed)) << raw;
    EXPECT_EQ(parse_tags(join(parsed.tags, ", ")), parsed);
  }
}

TEST(ParseTags, PreservesFirstAppearanceOrder) {
  EXPECT_EQ(tags_of("zeta, alpha, Zeta, mid"), (std::vector<std::string>{"zeta", "alpha", "mid"}));
}

TEST(Extract, CacheHitSkipsBackend) {
  auto backend = simulated_backend(1, [](std::uint64_t, const ChatRequest&) { return "x, y"; });
  ExtractionCache cache;
  const auto t = validate_template("T: {raw_text}");
  const auto d = make_document("some text");
  const auto first = extract(t, d, *backend, cache);
  EXPECT_EQ(first.tags, (std::vector<std::string>{"x", "y"}));
  EXPECT_EQ(backend->calls(), 1u);
  EXPECT_EQ(extract(t, d, *backend, cache), first);
  EXPECT_EQ(backend->calls(), 1u);
}

TEST(Extract, SendsSystemPromptAndTemperature) {
  ChatRequest seen;
  auto backend = simulated_backend(1, [&](std::uint64_t, const ChatRequest& r) {
    seen = r;
    return "a";
  });
  ExtractionCache cache;
  ExtractionOptions opts;
  opts.temperature = 0.7;
  extract(validate_template("T: {raw_text}"), make_document("body"), *backend, cache, opts);
  EXPECT_EQ(seen.system, kSystemPrompt);
  EXPECT_EQ(seen.user, "T: body");
  EXPECT_DOUBLE_EQ(seen.temperature, 0.7);
}

TEST(Extract, FailureIsWrappedAndNotCached) {
  auto backend = simulated_backend(1, failing_for({0}));
  ExtractionCache cache;
  const auto d = docs(1)[0];
  try {
    extract(validate_template("T: {raw_text}"), d, *backend, cache);
    FAIL();
  } catch (const ExtractionError& e) {
    EXPECT_EQ(e.kind(), ExtractionError::Kind::ExtractionFailed);
    EXPECT_EQ(e.document_id(), d.id);
  }
  EXPECT_EQ(cache.size(), 0u);
}

TEST(Extract, AuthFailurePropagates) {
  auto backend = simulated_backend(1, [](std::uint64_t, const ChatRequest&) -> std::string {
    throw LlmError(LlmError::Kind::AuthFailed, "no");
  });
  ExtractionCache cache;
  EXPECT_THROW(extract_corpus(validate_template("T: {raw_text}"), docs(5), *backend, cache), LlmError);
}

TEST(ExtractCorpus, DuplicateTextsAreExtractedOnce) {
  auto corpus = docs(70);
  for (int i = 0; i < 30; ++i) corpus.push_back(corpus[static_cast<std::size_t>(i)]);
  auto backend = simulated_backend(3, tagging_behavior());
  ExtractionCache cache;
  const auto col = extract_corpus(validate_template("T: {raw_text}"), corpus, *backend, cache);
  EXPECT_LE(backend->calls(), 70u);
  EXPECT_EQ(col.values.size(), 70u);
}

TEST(ExtractCorpus, SecondRunMakesNoCalls) {
  const auto corpus = docs(50);
  auto backend = simulated_backend(3, tagging_behavior());
  ExtractionCache cache;
  const auto t = validate_template("T: {raw_text}");
  const auto first = extract_corpus(t, corpus, *backend, cache);
  const auto calls = backend->calls();
  const auto second = extract_corpus(t, corpus, *backend, cache);
  EXPECT_EQ(backend->calls(), calls);
  EXPECT_EQ(first.values, second.values);
}

TEST(ExtractCorpus, ParallelismDoesNotChangeResults) {
  const auto corpus = docs(120);
  const auto t = validate_template("T: {raw_text}");
  auto b1 = simulated_backend(3, tagging_behavior());
  auto b8 = simulated_backend(3, tagging_behavior());
  ExtractionCache c1, c8;
  ExtractionOptions o1, o8;
  o1.parallelism = 1;
  o8.parallelism = 8;
  const auto col1 = extract_corpus(t, corpus, *b1, c1, o1);
  const auto col8 = extract_corpus(t, corpus, *b8, c8, o8);
  EXPECT_EQ(col1.values, col8.values);
  EXPECT_EQ(col1.coverage, col8.coverage);
}

TEST(ExtractCorpus, OneFailureOfHundredKeepsColumn) {
  auto backend = simulated_backend(1, failing_for({17}));
  ExtractionCache cache;
  const auto corpus = docs(100);
  const auto col = extract_corpus(validate_template("T: {raw_text}"), corpus, *backend, cache);
  EXPECT_EQ(col.failures, 1u);
  EXPECT_TRUE(col.values.at(corpus[17].id).is_unspecified());
  EXPECT_DOUBLE_EQ(col.coverage, 0.99);
}

TEST(ExtractCorpus, ThirtyFailuresOfHundredFailColumn) {
  std::set<int> bad;
  for (int i = 0; i < 30; ++i) bad.insert(i * 3);
  auto backend = simulated_backend(1, failing_for(bad));
  ExtractionCache cache;
  try {
    extract_corpus(validate_template("T: {raw_text}"), docs(100), *backend, cache);
    FAIL();
  } catch (const ExtractionError& e) {
    EXPECT_EQ(e.kind(), ExtractionError::Kind::ColumnFailed);
    EXPECT_DOUBLE_EQ(e.failure_fraction(), 0.30);
  }
}

TEST(ExtractionCache, PersistsAcrossInstancesAndSurvivesTornTail) {
  fltest::TempDir dir;
  const auto path = dir / "a1.cache";
  const auto t = validate_template("T: {raw_text}");
  const auto corpus = docs(20);
  {
    ExtractionCache cache(path);
    auto backend = simulated_backend(3, tagging_behavior());
    extract_corpus(t, corpus, *backend, cache);
    EXPECT_EQ(cache.size(), 20u);
  }
  fltest::spit(path, fltest::slurp(path) + "{\"template_id\":\"tor");
  ExtractionCache reloaded(path);
  EXPECT_EQ(reloaded.size(), 20u);
  auto backend = simulated_backend(3, tagging_behavior());
  extract_corpus(t, corpus, *backend, reloaded);
  EXPECT_EQ(backend->calls(), 0u);
  // A new key after the repaired tail is readable by the next instance.
  reloaded.put("other", "doc", TagList{{"z"}});
  EXPECT_EQ(ExtractionCache(path).get("other", "doc"), TagList{{"z"}});
}

TEST(ExtractionCache, DifferentTemplateMisses) {
  ExtractionCache cache;
  auto backend = simulated_backend(3, tagging_behavior());
  const auto corpus = docs(10);
  extract_corpus(validate_template("A {raw_text}"), corpus, *backend, cache);
  extract_corpus(validate_template("B {raw_text}"), corpus, *backend, cache);
  EXPECT_EQ(backend->calls(), 20u);
}

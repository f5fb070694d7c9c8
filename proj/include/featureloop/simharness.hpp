#pragma once

// A synthetic world with a known fitness landscape. Documents embed topic
// names among filler words; click labels depend on those topics; the
// simulated sentinel recovers topics with a fidelity set by which
// instruction keywords appear in the prompt; the simulated architect
// mutates the best prompt it is shown.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "featureloop/core.hpp"
#include "featureloop/llm.hpp"
#include "featureloop/oracle.hpp"
#include "featureloop/random.hpp"
#include "featureloop/sentinel.hpp"

namespace featureloop::sim {

inline const std::vector<std::string>& topic_names() {
  static const std::vector<std::string> names = {
      "astronomy", "cooking",     "finance",     "football",    "gardening",  "hiking",
      "jazz",      "knitting",    "machine learning", "opera",  "photography", "poker",
      "robotics",  "sailing",     "skincare",    "startups",    "tennis",     "travel",
      "vegan food", "video games", "weddings",   "wine",        "yoga",       "zoology"};
  return names;
}

inline std::vector<std::string> default_keywords() {
  return {"topic", "entity", "audience", "intent", "sentiment", "geography", "priority", "deduplicate"};
}

struct WorldSpec {
  std::uint64_t seed = 1;
  int n_topics = 12;
  int n_docs = 2000;
  int n_impressions = 50000;
  double base_ctr = 0.2;
  std::vector<double> topic_lift;  // per topic; empty means the default pattern
  std::vector<std::string> keyword_set = default_keywords();
  int n_publishers = 20;
  double publisher_lift_scale = 0.4;
  int n_noise_tags = 60;
  int filler_words = 40;
};

// Alternating +/- offsets shrinking with the topic index.
inline std::vector<double> default_topic_lift(int n_topics) {
  std::vector<double> lift(static_cast<std::size_t>(n_topics));
  for (int t = 0; t < n_topics; ++t) {
    const double mag = 1.2 - 0.8 * t / std::max(1, n_topics - 1);
    lift[static_cast<std::size_t>(t)] = (t % 2 == 0) ? mag : -mag;
  }
  return lift;
}

inline void check_spec(const WorldSpec& s) {
  if (s.n_topics < 1 || s.n_topics > static_cast<int>(topic_names().size())) {
    throw Error("n_topics must be in [1, " + std::to_string(topic_names().size()) + "]");
  }
  if (s.n_docs < 1 || s.n_impressions < 2) throw Error("world needs documents and impressions");
  if (!(s.base_ctr > 0.0 && s.base_ctr < 1.0)) throw Error("base_ctr must be in (0, 1)");
  if (s.keyword_set.empty()) throw Error("keyword_set must be nonempty");
  // All-zero lifts are accepted: null worlds are useful for calibration.
  if (!s.topic_lift.empty() && static_cast<int>(s.topic_lift.size()) != s.n_topics) {
    throw Error("topic_lift size != n_topics");
  }
  if (s.n_noise_tags < 1) throw Error("n_noise_tags must be positive");
}

struct World {
  WorldSpec spec;
  std::vector<Document> corpus;
  CtrDataset dataset;
  FeatureColumn truth;  // document_id -> true topic tags
  std::vector<std::vector<int>> doc_topics;
  std::vector<std::string> noise_vocab;
  std::vector<double> topic_lift;
};

inline std::string doc_marker(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "docref:%06d", index);
  return buf;
}

inline std::vector<std::string> filler_vocab() {
  static const char* syl[] = {"ba", "ke", "lo", "mu", "ra", "si", "vo", "ne", "du", "fa", "gi", "ho"};
  std::vector<std::string> out;
  for (const char* a : syl) {
    for (const char* b : syl) out.push_back(std::string(a) + b);
  }
  return out;
}

inline World gen_world(const WorldSpec& spec) {
  check_spec(spec);
  World w;
  w.spec = spec;
  w.topic_lift = spec.topic_lift.empty() ? default_topic_lift(spec.n_topics) : spec.topic_lift;
  for (int i = 0; i < spec.n_noise_tags; ++i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "noise%03d", i);
    w.noise_vocab.push_back(buf);
  }

  Rng rng(mix_seed(spec.seed, 0xd0c5ULL));
  const auto filler = filler_vocab();
  const auto& names = topic_names();
  std::vector<std::string> publisher_of(static_cast<std::size_t>(spec.n_docs));
  std::vector<double> doc_logit(static_cast<std::size_t>(spec.n_docs));

  std::vector<double> publisher_lift(static_cast<std::size_t>(spec.n_publishers));
  for (auto& l : publisher_lift) l = spec.publisher_lift_scale * (2.0 * rng.uniform() - 1.0);

  for (int d = 0; d < spec.n_docs; ++d) {
    std::vector<int> topics{static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.n_topics)))};
    if (spec.n_topics > 1 && rng.bernoulli(0.5)) {
      int second;
      do {
        second = static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.n_topics)));
      } while (second == topics[0]);
      topics.push_back(second);
    }

    std::vector<std::string> words;
    for (int i = 0; i < spec.filler_words; ++i) words.push_back(filler[rng.below(filler.size())]);
    for (int t : topics) {
      for (int rep = 0; rep < 2; ++rep) {
        const auto pos = rng.below(words.size() + 1);
        words.insert(words.begin() + static_cast<std::ptrdiff_t>(pos), names[static_cast<std::size_t>(t)]);
      }
    }
    std::string text = doc_marker(d);
    for (const auto& word : words) text += ' ' + word;
    w.corpus.push_back(make_document(std::move(text)));

    TagList truth;
    double lift = 0.0;
    for (int t : topics) {
      truth.tags.push_back(names[static_cast<std::size_t>(t)]);
      lift += w.topic_lift[static_cast<std::size_t>(t)];
    }
    const auto pub = rng.below(static_cast<std::uint64_t>(spec.n_publishers));
    publisher_of[static_cast<std::size_t>(d)] = "pub" + std::to_string(pub);
    doc_logit[static_cast<std::size_t>(d)] = lift + publisher_lift[pub];
    w.truth.values.emplace(w.corpus.back().id, std::move(truth));
    w.doc_topics.push_back(std::move(topics));
  }
  w.truth.template_id = "truth";
  w.truth.coverage = 1.0;

  static const char* devices[] = {"desktop", "mobile", "tablet"};
  const double device_lift[] = {0.1, -0.1, 0.0};
  const double base_logit = std::log(spec.base_ctr / (1.0 - spec.base_ctr));
  w.dataset.base_fields = {"device", "hour", "publisher"};
  for (int i = 0; i < spec.n_impressions; ++i) {
    const auto d = static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(spec.n_docs)));
    const auto dev = rng.below(3);
    Impression imp;
    imp.document_id = w.corpus[d].id;
    imp.time_index = i;
    imp.context = {{"device", devices[dev]},
                   {"hour", std::to_string(rng.below(24))},
                   {"publisher", publisher_of[d]}};
    const double p = sigmoid(base_logit + doc_logit[d] + device_lift[dev]);
    imp.label = rng.bernoulli(p) ? 1 : 0;
    w.dataset.impressions.push_back(std::move(imp));
  }
  return w;
}

// ---------------------------------------------------------------------------
// Simulated sentinel

inline std::vector<std::string> lower_words(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : text) {
    const auto uc = static_cast<unsigned char>(c);
    if (std::isalnum(uc) || c == '_') {
      cur.push_back(static_cast<char>(std::tolower(uc)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

inline std::size_t count_words(std::string_view text) {
  std::size_t n = 0;
  bool in_word = false;
  for (char c : text) {
    if (is_space(c)) {
      in_word = false;
    } else if (!in_word) {
      in_word = true;
      ++n;
    }
  }
  return n;
}

inline std::size_t keywords_present(std::string_view prompt, const std::vector<std::string>& keywords) {
  const auto words = lower_words(prompt);
  const std::set<std::string> bag(words.begin(), words.end());
  std::size_t n = 0;
  for (const auto& k : std::set<std::string>(keywords.begin(), keywords.end())) n += bag.count(to_lower_ascii(k));
  return n;
}

/// Keyword fraction minus 0.05 per 100 words beyond 200, floored at 0.
inline double prompt_fidelity(std::string_view prompt, const std::vector<std::string>& keywords) {
  const std::set<std::string> distinct(keywords.begin(), keywords.end());
  const double frac = static_cast<double>(keywords_present(prompt, keywords)) /
                      static_cast<double>(distinct.size());
  const double words = static_cast<double>(count_words(prompt));
  const double penalty = words > 200.0 ? 0.05 * (words - 200.0) / 100.0 : 0.0;
  return std::clamp(frac - penalty, 0.0, 1.0);
}

/// Locates the world document in a grounded request. Returns its index and
/// the prompt with the document text removed.
inline std::optional<std::pair<int, std::string>> locate_document(const World& w, std::string_view user) {
  const auto pos = user.find("docref:");
  if (pos == std::string_view::npos || pos + 13 > user.size()) return std::nullopt;
  int idx = 0;
  for (std::size_t i = pos + 7; i < pos + 13; ++i) {
    if (!std::isdigit(static_cast<unsigned char>(user[i]))) return std::nullopt;
    idx = idx * 10 + (user[i] - '0');
  }
  if (idx >= static_cast<int>(w.corpus.size())) return std::nullopt;
  const auto& text = w.corpus[static_cast<std::size_t>(idx)].raw_text;
  if (user.substr(pos, text.size()) != text) return std::nullopt;
  std::string prompt(user.substr(0, pos));
  prompt += user.substr(pos + text.size());
  return std::make_pair(idx, std::move(prompt));
}

inline Behavior sim_sentinel_behavior(std::shared_ptr<const World> world) {
  return [world](std::uint64_t seed, const ChatRequest& req) -> std::string {
    auto found = locate_document(*world, req.user);
    if (!found) return std::string(kUnspecified);
    const auto& [idx, prompt] = *found;
    const double f = prompt_fidelity(prompt, world->spec.keyword_set);
    Rng rng(mix_seed(mix_seed(seed, hash_bytes(prompt)), static_cast<std::uint64_t>(idx)));
    std::vector<std::string> out;
    for (int t : world->doc_topics[static_cast<std::size_t>(idx)]) {
      if (rng.bernoulli(f)) {
        out.push_back(topic_names()[static_cast<std::size_t>(t)]);
      } else {
        out.push_back(world->noise_vocab[rng.below(world->noise_vocab.size())]);
      }
    }
    if (out.empty()) return std::string(kUnspecified);
    return join(out, ", ");
  };
}

// ---------------------------------------------------------------------------
// Simulated architect

inline std::vector<std::string> split_sentences(const std::string& text) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    const auto pos = text.find(". ", start);
    if (pos == std::string::npos) {
      if (start < text.size()) out.push_back(text.substr(start));
      break;
    }
    out.push_back(text.substr(start, pos + 1 - start));
    start = pos + 2;
  }
  return out;
}

/// The prompt the simulated architect mutates: the first BEST entry of the
/// context block, or the original prompt when the block is empty.
inline std::string prompt_to_mutate(const std::string& instruction) {
  auto line_end = [&](std::size_t from) {
    const auto nl = instruction.find('\n', from);
    return nl == std::string::npos ? instruction.size() : nl;
  };
  const auto best = instruction.find("BEST PROMPTS (score)\n");
  if (best != std::string::npos) {
    const auto entry = instruction.find("[score=", best);
    if (entry != std::string::npos) {
      const auto close = instruction.find("] ", entry);
      if (close != std::string::npos) {
        const std::size_t begin = close + 2;
        std::size_t end = begin;
        // The entry runs until a separator or section header line.
        for (std::size_t pos = begin;;) {
          const std::size_t le = line_end(pos);
          end = le;
          if (le >= instruction.size()) break;
          const std::size_t next = le + 1;
          const std::string_view next_line(instruction.data() + next, line_end(next) - next);
          if (next_line == "---" || next_line == "WORST PROMPTS (score)") break;
          pos = next;
        }
        return instruction.substr(begin, end - begin);
      }
    }
  }
  const std::string label = "Original USER prompt: ";
  const auto orig = instruction.rfind(label);
  if (orig == std::string::npos) return std::string(kSeedUserTemplate);
  const auto begin = orig + label.size();
  const auto end = instruction.find("\n---", begin);
  return instruction.substr(begin, end == std::string::npos ? std::string::npos : end - begin);
}

/// With probability 0.7 prepends a sentence naming one missing keyword;
/// otherwise (or when nothing is missing) removes one random sentence that
/// holds neither a keyword nor the placeholder.
inline std::string mutate_prompt(const std::string& prompt, const std::vector<std::string>& keywords,
                                 Rng& rng) {
  std::vector<std::string> missing;
  const auto words = lower_words(prompt);
  const std::set<std::string> bag(words.begin(), words.end());
  for (const auto& k : std::set<std::string>(keywords.begin(), keywords.end())) {
    if (!bag.count(to_lower_ascii(k))) missing.push_back(k);
  }
  const bool add = rng.bernoulli(0.7);
  if (add && !missing.empty()) {
    const auto& k = missing[rng.below(missing.size())];
    return "Prioritize the " + k + " of the text. " + prompt;
  }
  auto sentences = split_sentences(prompt);
  std::vector<std::size_t> removable;
  for (std::size_t i = 0; i < sentences.size(); ++i) {
    if (sentences[i].find(kPlaceholder) != std::string::npos) continue;
    if (keywords_present(sentences[i], keywords) > 0) continue;
    removable.push_back(i);
  }
  if (removable.empty()) return prompt;
  sentences.erase(sentences.begin() + static_cast<std::ptrdiff_t>(removable[rng.below(removable.size())]));
  return join(sentences, " ");
}

inline Behavior sim_architect_behavior(std::shared_ptr<const World> world) {
  return [world](std::uint64_t seed, const ChatRequest& req) -> std::string {
    Rng rng(mix_seed(seed, hash_bytes(req.user)));
    return mutate_prompt(prompt_to_mutate(req.user), world->spec.keyword_set, rng);
  };
}

// ---------------------------------------------------------------------------
// Files

inline void write_spec(const std::filesystem::path& path, const WorldSpec& s) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out.precision(17);
  out << "seed=" << s.seed << "\n"
      << "n_topics=" << s.n_topics << "\n"
      << "n_docs=" << s.n_docs << "\n"
      << "n_impressions=" << s.n_impressions << "\n"
      << "base_ctr=" << s.base_ctr << "\n"
      << "keyword_set=" << join(s.keyword_set, ",") << "\n"
      << "n_publishers=" << s.n_publishers << "\n"
      << "publisher_lift_scale=" << s.publisher_lift_scale << "\n"
      << "n_noise_tags=" << s.n_noise_tags << "\n"
      << "filler_words=" << s.filler_words << "\n";
  if (!s.topic_lift.empty()) {
    out << "topic_lift=";
    for (std::size_t i = 0; i < s.topic_lift.size(); ++i) out << (i ? "," : "") << s.topic_lift[i];
    out << "\n";
  }
}

inline WorldSpec read_spec(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open world spec " + path.string());
  WorldSpec s;
  std::string line;
  while (std::getline(in, line)) {
    const auto t = trim(line);
    if (t.empty() || t.front() == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string_view::npos) throw Error("bad world spec line: " + std::string(t));
    const std::string key(trim(t.substr(0, eq)));
    const std::string val(trim(t.substr(eq + 1)));
    auto list = [&] {
      std::vector<std::string> out;
      std::stringstream ss(val);
      std::string item;
      while (std::getline(ss, item, ',')) {
        if (!trim(item).empty()) out.emplace_back(trim(item));
      }
      return out;
    };
    if (key == "seed") s.seed = std::stoull(val);
    else if (key == "n_topics") s.n_topics = std::stoi(val);
    else if (key == "n_docs") s.n_docs = std::stoi(val);
    else if (key == "n_impressions") s.n_impressions = std::stoi(val);
    else if (key == "base_ctr") s.base_ctr = std::stod(val);
    else if (key == "keyword_set") s.keyword_set = list();
    else if (key == "n_publishers") s.n_publishers = std::stoi(val);
    else if (key == "publisher_lift_scale") s.publisher_lift_scale = std::stod(val);
    else if (key == "n_noise_tags") s.n_noise_tags = std::stoi(val);
    else if (key == "filler_words") s.filler_words = std::stoi(val);
    else if (key == "topic_lift") {
      s.topic_lift.clear();
      for (const auto& v : list()) s.topic_lift.push_back(std::stod(v));
    } else {
      throw Error("unknown world spec key: " + key);
    }
  }
  check_spec(s);
  return s;
}

/// Corpus file: one JSON object per line, {"id":..., "raw_text":...}.
inline void write_corpus(const std::filesystem::path& path, const std::vector<Document>& docs) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  for (const auto& d : docs) {
    out << nlohmann::json{{"id", d.id}, {"raw_text", d.raw_text}}.dump() << '\n';
  }
}

inline std::vector<Document> read_corpus(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open corpus " + path.string());
  std::vector<Document> docs;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.contains("raw_text")) {
      throw Error(path.string() + ":" + std::to_string(line_no) + ": bad corpus line");
    }
    Document d = make_document(j["raw_text"].get<std::string>());
    if (j.contains("id") && j["id"].get<std::string>() != d.id) {
      throw Error(path.string() + ":" + std::to_string(line_no) + ": id does not match content hash");
    }
    docs.push_back(std::move(d));
  }
  return docs;
}

struct WorldFiles {
  std::filesystem::path spec, corpus, dataset, truth;
};

inline WorldFiles world_files(const std::filesystem::path& dir) {
  return {dir / "world.cfg", dir / "corpus.jsonl", dir / "dataset.tsv", dir / "truth.tsv"};
}

inline WorldFiles write_world(const std::filesystem::path& dir, const World& w) {
  std::filesystem::create_directories(dir);
  const auto files = world_files(dir);
  write_spec(files.spec, w.spec);
  write_corpus(files.corpus, w.corpus);
  write_dataset(files.dataset, w.dataset);
  write_column(files.truth, w.truth);
  return files;
}

}  // namespace featureloop::sim

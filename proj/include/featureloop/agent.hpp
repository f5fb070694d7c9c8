#pragma once

#include <atomic>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "featureloop/architect.hpp"
#include "featureloop/control.hpp"
#include "featureloop/core.hpp"
#include "featureloop/llm.hpp"
#include "featureloop/memory.hpp"
#include "featureloop/oracle.hpp"
#include "featureloop/sentinel.hpp"
#include "featureloop/simharness.hpp"

namespace featureloop {

/// Sentinel -> oracle for one prompt. Never throws: extraction problems give
/// status extraction_failed, oracle problems eval_failed, both with zero
/// scores.
inline ScoreRecord evaluate_prompt(const PromptTemplate& tmpl, const std::vector<Document>& corpus,
                                   const Oracle& oracle, Backend& sentinel, ExtractionCache& cache,
                                   const ExtractionOptions& extraction, const std::string& agent_id) {
  ScoreRecord rec;
  rec.prompt_id = tmpl.id;
  rec.prompt_text = tmpl.user_template;
  rec.agent_id = agent_id;
  rec.repeats = oracle.config().repeats;
  rec.eval_size = static_cast<std::int64_t>(oracle.split().eval.size());
  rec.created_at = now_rfc3339();

  FeatureColumn column;
  try {
    column = extract_corpus(tmpl, corpus, sentinel, cache, extraction);
  } catch (const std::exception&) {
    rec.status = Status::extraction_failed;
    return rec;
  }
  try {
    const EvalResult res = oracle.score(&column);
    rec.baseline_rig = res.baseline_rig;
    rec.extended_rig = res.extended_rig;
    // Stored as the difference of the means so the record invariant holds
    // bit-exactly; it equals the mean of deltas up to rounding.
    rec.relative_score = res.extended_rig - res.baseline_rig;
    rec.status = Status::ok;
  } catch (const std::exception&) {
    rec.baseline_rig = rec.extended_rig = rec.relative_score = 0.0;
    rec.status = Status::eval_failed;
  }
  return rec;
}

inline ScoreRecord evaluate_prompt(const PromptTemplate& tmpl, const std::vector<Document>& corpus,
                                   const CtrDataset& dataset, const OracleConfig& oracle_cfg,
                                   Backend& sentinel, ExtractionCache& cache,
                                   const ExtractionOptions& extraction, const std::string& agent_id) {
  std::optional<Oracle> oracle;
  try {
    oracle.emplace(dataset, oracle_cfg);
  } catch (const std::exception&) {
    ScoreRecord rec;
    rec.prompt_id = tmpl.id;
    rec.prompt_text = tmpl.user_template;
    rec.agent_id = agent_id;
    rec.repeats = std::max(1, oracle_cfg.repeats);
    rec.status = Status::eval_failed;
    rec.created_at = now_rfc3339();
    return rec;
  }
  return evaluate_prompt(tmpl, corpus, *oracle, sentinel, cache, extraction, agent_id);
}

// ---------------------------------------------------------------------------
// Single agent

struct AgentConfig {
  std::string agent_id = "a1";
  PromptTemplate seed_prompt = validate_template(kSeedUserTemplate);
  double sentinel_temperature = 0.2;
  double architect_temperature = 1.0;
  double epsilon = 0.2;
  int max_generations = 30;
  std::chrono::milliseconds wall_clock_budget{std::chrono::minutes(10)};
  bool dedup = true;
  bool paused = false;
  std::uint64_t rng_seed = 0;
  std::chrono::milliseconds idle_poll{20};
};

struct AgentResources {
  const std::vector<Document>* corpus = nullptr;
  const Oracle* oracle = nullptr;
  Backend* sentinel = nullptr;
  Backend* architect = nullptr;
  ExtractionCache* cache = nullptr;
  MemoryStore* memory = nullptr;
  ControlLog* control = nullptr;  // optional
  ExtractionOptions extraction;
  std::string architect_model;
  const std::atomic<bool>* stop = nullptr;  // optional
};

struct AgentSummary {
  std::string agent_id;
  int generations = 0;       // refinements evaluated
  int evaluations = 0;       // all evaluations, seeds included
  int skipped_duplicates = 0;
  int refine_failures = 0;
  std::vector<std::int64_t> appended;
  std::optional<double> best_score;
  bool aborted = false;
  std::string error;
};

/// The closed loop: evaluate the seed if memory lacks it, then repeatedly
/// select a base, refine it, skip known prompts (when dedup is on), evaluate
/// and append. Control commands are read between generations. Stops after
/// `max_generations` refinements or when the wall-clock budget runs out.
inline AgentSummary run_agent(const AgentConfig& cfg, const AgentResources& res) {
  using Steady = std::chrono::steady_clock;
  const auto deadline = Steady::now() + cfg.wall_clock_budget;
  auto out_of_time = [&] {
    return Steady::now() >= deadline || (res.stop && res.stop->load());
  };
  auto idle = [&] { std::this_thread::sleep_for(cfg.idle_poll); };

  AgentSummary summary;
  summary.agent_id = cfg.agent_id;
  Rng rng(mix_seed(cfg.rng_seed, hash_bytes(cfg.agent_id)));
  std::unordered_map<std::string, PromptTemplate> lineage{{cfg.seed_prompt.id, cfg.seed_prompt}};
  ExtractionOptions extraction = res.extraction;
  extraction.temperature = cfg.sentinel_temperature;
  std::int64_t consumed_seed = -1;

  auto evaluate_and_append = [&](const PromptTemplate& tmpl) {
    ScoreRecord rec = evaluate_prompt(tmpl, *res.corpus, *res.oracle, *res.sentinel, *res.cache,
                                      extraction, cfg.agent_id);
    summary.appended.push_back(res.memory->append(rec));
    ++summary.evaluations;
    if (rec.status == Status::ok &&
        (!summary.best_score || rec.relative_score > *summary.best_score)) {
      summary.best_score = rec.relative_score;
    }
  };

  // Returns the agent's control view, or nullopt when it should idle.
  auto poll_control = [&]() -> std::optional<std::pair<AgentControl, ControlState>> {
    ControlState st = res.control ? res.control->state() : ControlState{};
    AgentControl ac = st.agent(cfg.agent_id);
    if (!res.control) ac.paused = cfg.paused;
    if (ac.paused) return std::nullopt;
    return std::make_pair(ac, std::move(st));
  };

  try {
    if (res.control) {
      ControlCommand reg;
      reg.kind = ControlKind::register_agent;
      reg.agent_id = cfg.agent_id;
      res.control->append(reg);
    }

    bool seed_done = false;
    while (!out_of_time() && summary.generations < cfg.max_generations) {
      auto polled = poll_control();
      if (!polled) {
        idle();
        continue;
      }
      const auto& [ac, state] = *polled;

      if (!seed_done) {
        seed_done = true;
        if (!res.memory->contains(cfg.seed_prompt.id)) {
          evaluate_and_append(cfg.seed_prompt);
          continue;
        }
      }

      bool injected = false;
      for (const auto& s : state.seeds) {
        if (s.seq <= consumed_seed) continue;
        consumed_seed = s.seq;
        PromptTemplate tmpl;
        try {
          tmpl = validate_template(s.user_template, cfg.agent_id);
        } catch (const TemplateError&) {
          continue;
        }
        lineage.emplace(tmpl.id, tmpl);
        if (cfg.dedup && res.memory->contains(tmpl.id)) continue;
        evaluate_and_append(tmpl);
        injected = true;
        break;
      }
      if (injected) continue;

      const double epsilon = ac.epsilon.value_or(cfg.epsilon);
      const std::string base_text = select_base(*res.memory, rng, epsilon, cfg.seed_prompt.user_template);
      PromptTemplate base;
      if (auto it = lineage.find(content_hash(base_text)); it != lineage.end()) {
        base = it->second;
      } else {
        // Written by another agent: its lineage is not recorded in memory.
        base = validate_template(base_text, cfg.agent_id);
        base.parent_id = cfg.seed_prompt.id;
        base.generation = 1;
      }

      RefineOptions ropts;
      ropts.temperature = ac.temperature.value_or(cfg.architect_temperature);
      ropts.model = res.architect_model;
      ropts.agent_id = cfg.agent_id;
      PromptTemplate candidate;
      try {
        candidate = refine(base, *res.memory, *res.architect, ropts);
      } catch (const RefinementError&) {
        ++summary.refine_failures;
        idle();
        continue;
      } catch (const LlmError& e) {
        if (e.kind() == LlmError::Kind::AuthFailed) throw;
        ++summary.refine_failures;
        idle();
        continue;
      }

      if (cfg.dedup && res.memory->contains(candidate.id)) {
        ++summary.skipped_duplicates;
        idle();
        continue;
      }
      lineage.emplace(candidate.id, candidate);
      evaluate_and_append(candidate);
      ++summary.generations;
    }
  } catch (const std::exception& e) {
    summary.aborted = true;
    summary.error = e.what();
  }
  return summary;
}

// ---------------------------------------------------------------------------
// Fleet

struct FleetConfig {
  int n_agents = 4;
  std::filesystem::path memory;
  std::filesystem::path corpus;
  std::filesystem::path dataset;
  std::filesystem::path world;      // directory written by `simulate`; required for the sim backend
  std::filesystem::path cache_dir;  // empty: in-memory caches
  std::filesystem::path control;    // empty: no external control
  std::string backend = "sim";      // sim | http
  std::string seed_prompt;          // user template text; empty: built-in seed
  double epsilon = 0.2;
  double sentinel_temperature = 0.2;
  double architect_temperature = 1.0;
  int max_generations = 30;
  double budget_seconds = 600.0;
  bool dedup = true;
  std::uint64_t seed = 1;
  std::size_t parallelism = 4;
  OracleConfig oracle;
  // agent index (1-based) -> key -> value
  std::map<int, std::map<std::string, std::string>> overrides;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

namespace fleet_detail {

inline bool parse_bool(const std::string& v) {
  const auto l = to_lower_ascii(v);
  if (l == "true" || l == "1" || l == "yes" || l == "on") return true;
  if (l == "false" || l == "0" || l == "no" || l == "off") return false;
  throw ConfigError("not a boolean: " + v);
}

inline void apply_agent_key(AgentConfig& a, const std::string& key, const std::string& v) {
  if (key == "epsilon") a.epsilon = std::stod(v);
  else if (key == "sentinel_temperature") a.sentinel_temperature = std::stod(v);
  else if (key == "architect_temperature") a.architect_temperature = std::stod(v);
  else if (key == "max_generations") a.max_generations = std::stoi(v);
  else if (key == "dedup") a.dedup = parse_bool(v);
  else if (key == "paused") a.paused = parse_bool(v);
  else if (key == "budget_seconds") {
    a.wall_clock_budget = std::chrono::milliseconds(static_cast<std::int64_t>(std::stod(v) * 1000));
  } else {
    throw ConfigError("unknown per-agent key: " + key);
  }
}

}  // namespace fleet_detail

/// Parses `key=value` lines (`#` comments allowed). Relative paths resolve
/// against the directory of the file. Per-agent overrides use
/// `agent.<index>.<key>=value`.
inline FleetConfig read_fleet_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open fleet config " + path.string());
  const auto base = path.parent_path();
  auto resolve = [&](const std::string& v) {
    std::filesystem::path p(v);
    return p.is_absolute() || v.empty() ? p : base / p;
  };
  FleetConfig c;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto t = trim(line);
    if (t.empty() || t.front() == '#') continue;
    const auto eq = t.find('=');
    const std::string where = path.string() + ":" + std::to_string(line_no);
    if (eq == std::string_view::npos) throw ConfigError(where + ": expected key=value");
    const std::string key(trim(t.substr(0, eq)));
    const std::string v(trim(t.substr(eq + 1)));
    try {
      if (key == "n_agents") c.n_agents = std::stoi(v);
      else if (key == "memory") c.memory = resolve(v);
      else if (key == "corpus") c.corpus = resolve(v);
      else if (key == "dataset") c.dataset = resolve(v);
      else if (key == "world") c.world = resolve(v);
      else if (key == "cache_dir") c.cache_dir = resolve(v);
      else if (key == "control") c.control = resolve(v);
      else if (key == "backend") c.backend = v;
      else if (key == "seed_prompt") c.seed_prompt = v;
      else if (key == "seed_prompt_file") {
        std::ifstream f(resolve(v));
        if (!f) throw ConfigError("cannot open seed prompt file " + v);
        c.seed_prompt.assign(std::istreambuf_iterator<char>(f), {});
      }
      else if (key == "epsilon") c.epsilon = std::stod(v);
      else if (key == "sentinel_temperature") c.sentinel_temperature = std::stod(v);
      else if (key == "architect_temperature") c.architect_temperature = std::stod(v);
      else if (key == "max_generations") c.max_generations = std::stoi(v);
      else if (key == "budget_seconds") c.budget_seconds = std::stod(v);
      else if (key == "dedup") c.dedup = fleet_detail::parse_bool(v);
      else if (key == "seed") c.seed = std::stoull(v);
      else if (key == "parallelism") c.parallelism = static_cast<std::size_t>(std::stoul(v));
      else if (key == "repeats") c.oracle.repeats = std::stoi(v);
      else if (key == "eval_fraction") c.oracle.eval_fraction = std::stod(v);
      else if (key == "hash_dim") c.oracle.train.hash_dim = static_cast<std::uint32_t>(std::stoul(v));
      else if (key == "learning_rate") c.oracle.train.learning_rate = std::stod(v);
      else if (key == "epochs") c.oracle.train.epochs = std::stoi(v);
      else if (key == "l2") c.oracle.train.l2 = std::stod(v);
      else if (key.rfind("agent.", 0) == 0) {
        const auto dot = key.find('.', 6);
        if (dot == std::string::npos) throw ConfigError(where + ": expected agent.<index>.<key>");
        const int idx = std::stoi(key.substr(6, dot - 6));
        AgentConfig probe;
        fleet_detail::apply_agent_key(probe, key.substr(dot + 1), v);
        c.overrides[idx][key.substr(dot + 1)] = v;
      } else {
        throw ConfigError(where + ": unknown key '" + key + "'");
      }
    } catch (const std::invalid_argument&) {
      throw ConfigError(where + ": bad value for " + key);
    } catch (const std::out_of_range&) {
      throw ConfigError(where + ": value out of range for " + key);
    }
  }
  if (c.n_agents < 1) throw ConfigError("n_agents must be at least 1");
  if (c.memory.empty()) throw ConfigError("fleet config needs memory=<path>");
  if (c.backend != "sim" && c.backend != "http") throw ConfigError("backend must be sim or http");
  return c;
}

inline std::string agent_name(int index) { return "a" + std::to_string(index); }

inline AgentConfig agent_config(const FleetConfig& fc, int index) {
  AgentConfig a;
  a.agent_id = agent_name(index);
  if (!fc.seed_prompt.empty()) a.seed_prompt = validate_template(fc.seed_prompt);
  a.sentinel_temperature = fc.sentinel_temperature;
  a.architect_temperature = fc.architect_temperature;
  a.epsilon = fc.epsilon;
  a.max_generations = fc.max_generations;
  a.wall_clock_budget = std::chrono::milliseconds(static_cast<std::int64_t>(fc.budget_seconds * 1000));
  a.dedup = fc.dedup;
  a.rng_seed = mix_seed(fc.seed, static_cast<std::uint64_t>(index));
  if (auto it = fc.overrides.find(index); it != fc.overrides.end()) {
    for (const auto& [k, v] : it->second) fleet_detail::apply_agent_key(a, k, v);
  }
  return a;
}

struct FleetInputs {
  std::vector<Document> corpus;
  CtrDataset dataset;
  std::shared_ptr<const sim::World> world;  // set for the sim backend
};

inline FleetInputs load_fleet_inputs(const FleetConfig& fc) {
  FleetInputs in;
  if (fc.backend == "sim") {
    if (fc.world.empty()) throw ConfigError("the sim backend needs world=<directory>");
    in.world = std::make_shared<const sim::World>(sim::gen_world(sim::read_spec(sim::world_files(fc.world).spec)));
  }
  if (!fc.corpus.empty()) {
    in.corpus = sim::read_corpus(fc.corpus);
  } else if (in.world) {
    in.corpus = in.world->corpus;
  } else {
    throw ConfigError("fleet config needs corpus=<path>");
  }
  if (!fc.dataset.empty()) {
    in.dataset = read_dataset(fc.dataset);
  } else if (in.world) {
    in.dataset = in.world->dataset;
  } else {
    throw ConfigError("fleet config needs dataset=<path>");
  }
  return in;
}

struct FleetSummary {
  std::vector<AgentSummary> agents;
  std::optional<double> best_score;
  std::size_t records = 0;
};

/// Runs agents as threads. Each agent opens its own memory handle, cache and
/// backends; the memory file (and optional control file) is all they share.
/// With `only_agent` set, runs just that agent (used for one-process-per-agent
/// deployments).
inline FleetSummary run_fleet(const FleetConfig& fc, const FleetInputs& inputs,
                              std::optional<int> only_agent = std::nullopt,
                              const std::atomic<bool>* stop = nullptr) {
  const Oracle oracle(inputs.dataset, fc.oracle);
  std::vector<int> indices;
  for (int i = 1; i <= fc.n_agents; ++i) {
    if (!only_agent || *only_agent == i) indices.push_back(i);
  }
  std::vector<AgentSummary> summaries(indices.size());
  std::vector<std::jthread> threads;
  for (std::size_t k = 0; k < indices.size(); ++k) {
    threads.emplace_back([&, k] {
      const int index = indices[k];
      AgentSummary& out = summaries[k];
      out.agent_id = agent_name(index);
      try {
        const AgentConfig cfg = agent_config(fc, index);
        std::unique_ptr<Backend> sentinel, architect;
        if (fc.backend == "sim") {
          sentinel = simulated_backend(fc.seed, sim::sim_sentinel_behavior(inputs.world));
          architect = simulated_backend(mix_seed(fc.seed, static_cast<std::uint64_t>(index)),
                                        sim::sim_architect_behavior(inputs.world));
        } else {
          sentinel = std::make_unique<HttpBackend>(http_config_from_env(BackendRole::sentinel));
          architect = std::make_unique<HttpBackend>(http_config_from_env(BackendRole::architect));
        }
        MemoryStore memory(fc.memory);
        std::unique_ptr<ExtractionCache> cache;
        if (fc.cache_dir.empty()) {
          cache = std::make_unique<ExtractionCache>();
        } else {
          std::filesystem::create_directories(fc.cache_dir);
          cache = std::make_unique<ExtractionCache>(fc.cache_dir / (cfg.agent_id + ".cache"));
        }
        std::optional<ControlLog> control;
        if (!fc.control.empty()) control.emplace(fc.control);

        AgentResources res;
        res.corpus = &inputs.corpus;
        res.oracle = &oracle;
        res.sentinel = sentinel.get();
        res.architect = architect.get();
        res.cache = cache.get();
        res.memory = &memory;
        res.control = control ? &*control : nullptr;
        res.extraction.parallelism = fc.parallelism;
        if (fc.backend == "http") {
          res.extraction.model = http_config_from_env(BackendRole::sentinel).model;
          res.architect_model = http_config_from_env(BackendRole::architect).model;
        }
        res.stop = stop;
        out = run_agent(cfg, res);
      } catch (const std::exception& e) {
        out.aborted = true;
        out.error = e.what();
      }
    });
  }
  threads.clear();

  FleetSummary fs;
  fs.agents = std::move(summaries);
  const MemoryStore memory(fc.memory);
  for (const auto& r : memory.read_all()) {
    ++fs.records;
    if (r.status == Status::ok && (!fs.best_score || r.relative_score > *fs.best_score)) {
      fs.best_score = r.relative_score;
    }
  }
  return fs;
}

}  // namespace featureloop

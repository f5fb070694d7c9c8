#pragma once

#include <signal.h>
#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "featureloop/agent.hpp"
#include "featureloop/analysis.hpp"
#include "featureloop/memory.hpp"
#include "featureloop/oracle.hpp"
#include "featureloop/server.hpp"
#include "featureloop/simharness.hpp"

namespace featureloop {

enum ExitCode : int { kExitOk = 0, kExitFailure = 1, kExitUsage = 2 };

namespace cli_detail {

inline std::string self_executable() {
  std::error_code ec;
  auto p = std::filesystem::read_symlink("/proc/self/exe", ec);
  return ec ? std::string("featureloop") : p.string();
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), {}};
}

inline std::string fmt(double v) {
  std::ostringstream s;
  s << std::setprecision(10) << v;
  return s.str();
}

inline std::string truncate_text(std::string_view text, std::size_t n) {
  std::string flat = collapse_whitespace(text);
  if (flat.size() <= n) return flat;
  return flat.substr(0, n - 3) + "...";
}

// One line per record, no header: `seq agent status score prompt`.
inline void print_records(std::ostream& out, const std::vector<ScoreRecord>& records, bool json) {
  if (json) {
    for (const auto& r : records) out << to_json(r).dump() << '\n';
    return;
  }
  for (const auto& r : records) {
    out << r.seq << '\t' << r.agent_id << '\t' << to_string(r.status) << '\t' << fmt(r.relative_score) << '\t'
        << truncate_text(r.prompt_text, 80) << '\n';
  }
}

// Launches `exe args...` and returns its pid.
inline pid_t spawn(const std::string& exe, const std::vector<std::string>& args) {
  std::vector<char*> argv;
  argv.push_back(const_cast<char*>(exe.c_str()));
  for (const auto& a : args) argv.push_back(const_cast<char*>(a.c_str()));
  argv.push_back(nullptr);
  pid_t pid = 0;
  const int rc = posix_spawn(&pid, exe.c_str(), nullptr, nullptr, argv.data(), environ);
  if (rc != 0) throw Error("posix_spawn failed for " + exe + ": " + std::strerror(rc));
  return pid;
}

inline int wait_exit(pid_t pid) {
  int status = 0;
  while (waitpid(pid, &status, 0) < 0) {
    if (errno != EINTR) return -1;
  }
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

struct RunArgs {
  std::string config;
  bool spawn_processes = false;
  int only_agent = 0;
  bool json = false;
};

inline int cmd_run(const RunArgs& a, std::ostream& out, std::ostream& err, const std::string& self) {
  const FleetConfig fc = read_fleet_config(a.config);
  if (a.spawn_processes) {
    std::vector<pid_t> pids;
    for (int i = 1; i <= fc.n_agents; ++i) {
      pids.push_back(spawn(self, {"run", "--config", a.config, "--only-agent", std::to_string(i)}));
    }
    int failed = 0;
    for (auto pid : pids) failed += wait_exit(pid) != 0;
    const MemoryStore memory(fc.memory);
    const auto records = memory.read_all();
    const auto best = memory.top_k(1);
    if (a.json) {
      out << nlohmann::json{{"records", records.size()},
                            {"best_score", best.empty() ? nlohmann::json() : nlohmann::json(best[0].relative_score)},
                            {"failed_agents", failed}}
                 .dump()
          << '\n';
    } else {
      out << "records\t" << records.size() << '\n';
      out << "best_score\t" << (best.empty() ? std::string("none") : fmt(best[0].relative_score)) << '\n';
    }
    if (failed) err << failed << " agent process(es) failed\n";
    return failed ? kExitFailure : kExitOk;
  }

  if (a.only_agent && (a.only_agent < 1 || a.only_agent > fc.n_agents)) {
    err << "--only-agent must be in [1, " << fc.n_agents << "]\n";
    return kExitUsage;
  }
  const FleetInputs inputs = load_fleet_inputs(fc);
  const FleetSummary fs = run_fleet(fc, inputs, a.only_agent ? std::optional<int>(a.only_agent) : std::nullopt);
  bool aborted = false;
  if (a.json) {
    nlohmann::json agents = nlohmann::json::array();
    for (const auto& s : fs.agents) {
      agents.push_back({{"agent_id", s.agent_id},
                        {"generations", s.generations},
                        {"evaluations", s.evaluations},
                        {"skipped_duplicates", s.skipped_duplicates},
                        {"refine_failures", s.refine_failures},
                        {"best_score", s.best_score ? nlohmann::json(*s.best_score) : nlohmann::json()},
                        {"aborted", s.aborted},
                        {"error", s.error}});
    }
    out << nlohmann::json{{"agents", agents},
                          {"records", fs.records},
                          {"best_score", fs.best_score ? nlohmann::json(*fs.best_score) : nlohmann::json()}}
               .dump()
        << '\n';
  } else {
    out << "agent\tgenerations\tevaluations\tduplicates\tbest\n";
    for (const auto& s : fs.agents) {
      out << s.agent_id << '\t' << s.generations << '\t' << s.evaluations << '\t' << s.skipped_duplicates << '\t'
          << (s.best_score ? fmt(*s.best_score) : std::string("none")) << '\n';
    }
    out << "records\t" << fs.records << '\n';
    out << "best_score\t" << (fs.best_score ? fmt(*fs.best_score) : std::string("none")) << '\n';
  }
  for (const auto& s : fs.agents) {
    if (s.aborted) {
      aborted = true;
      err << s.agent_id << " aborted: " << s.error << '\n';
    }
  }
  return aborted ? kExitFailure : kExitOk;
}

struct EvalArgs {
  std::string world, dataset, corpus, column, prompt;
  std::string backend = "sim";
  double eval_fraction = 0.2;
  int repeats = 3;
  bool json = false;
};

inline int cmd_eval(const EvalArgs& a, std::ostream& out, std::ostream& err) {
  std::shared_ptr<const sim::World> world;
  std::optional<sim::WorldFiles> files;
  if (!a.world.empty()) files = sim::world_files(a.world);
  const std::string dataset_path = !a.dataset.empty() ? a.dataset : files ? files->dataset.string() : "";
  if (dataset_path.empty()) {
    err << "eval needs --dataset or --world\n";
    return kExitUsage;
  }
  if (a.column.empty() == a.prompt.empty()) {
    err << "eval needs exactly one of --column or --prompt\n";
    return kExitUsage;
  }
  OracleConfig ocfg;
  ocfg.eval_fraction = a.eval_fraction;
  ocfg.repeats = a.repeats;
  const CtrDataset dataset = read_dataset(dataset_path);

  EvalResult result;
  std::string prompt_id;
  double coverage = 0.0;
  if (!a.column.empty()) {
    const FeatureColumn column = read_column(a.column);
    coverage = column.coverage;
    result = relative_score(dataset, &column, ocfg);
  } else {
    const PromptTemplate tmpl = validate_template(read_file(a.prompt));
    prompt_id = tmpl.id;
    std::unique_ptr<Backend> backend;
    std::vector<Document> corpus;
    if (a.backend == "sim") {
      if (!files) {
        err << "--backend sim needs --world\n";
        return kExitUsage;
      }
      world = std::make_shared<const sim::World>(sim::gen_world(sim::read_spec(files->spec)));
      backend = simulated_backend(world->spec.seed, sim::sim_sentinel_behavior(world));
    } else if (a.backend == "http") {
      backend = std::make_unique<HttpBackend>(http_config_from_env(BackendRole::sentinel));
    } else {
      err << "--backend must be sim or http\n";
      return kExitUsage;
    }
    const std::string corpus_path = !a.corpus.empty() ? a.corpus : files ? files->corpus.string() : "";
    if (corpus_path.empty()) {
      err << "eval --prompt needs --corpus or --world\n";
      return kExitUsage;
    }
    corpus = sim::read_corpus(corpus_path);
    ExtractionCache cache;
    const FeatureColumn column = extract_corpus(tmpl, corpus, *backend, cache, ExtractionOptions{});
    coverage = column.coverage;
    result = relative_score(dataset, &column, ocfg);
  }

  if (a.json) {
    nlohmann::json reps = nlohmann::json::array();
    for (const auto& r : result.repeats) reps.push_back({{"baseline_rig", r.baseline_rig}, {"extended_rig", r.extended_rig}});
    nlohmann::json j{{"relative_score", result.relative_score},
                     {"baseline_rig", result.baseline_rig},
                     {"extended_rig", result.extended_rig},
                     {"eval_size", result.eval_size},
                     {"coverage", coverage},
                     {"repeats", reps}};
    if (!prompt_id.empty()) j["prompt_id"] = prompt_id;
    out << j.dump() << '\n';
  } else {
    if (!prompt_id.empty()) out << "prompt_id\t" << prompt_id << '\n';
    out << "relative_score\t" << fmt(result.relative_score) << '\n';
    out << "baseline_rig\t" << fmt(result.baseline_rig) << '\n';
    out << "extended_rig\t" << fmt(result.extended_rig) << '\n';
    out << "eval_size\t" << result.eval_size << '\n';
    out << "coverage\t" << fmt(coverage) << '\n';
    out << "repeats\t" << result.repeats.size() << '\n';
  }
  return kExitOk;
}

struct MemoryArgs {
  std::string path;
  std::size_t k = 10;
  bool json = false;
};

struct SimulateArgs {
  std::string out_dir;
  std::uint64_t seed = 1;
  int topics = 12;
  int docs = 2000;
  int impressions = 50000;
  double base_ctr = 0.2;
  bool json = false;
};

inline int cmd_simulate(const SimulateArgs& a, std::ostream& out) {
  sim::WorldSpec spec;
  spec.seed = a.seed;
  spec.n_topics = a.topics;
  spec.n_docs = a.docs;
  spec.n_impressions = a.impressions;
  spec.base_ctr = a.base_ctr;
  const auto files = sim::write_world(a.out_dir, sim::gen_world(spec));
  if (a.json) {
    out << nlohmann::json{{"spec", files.spec.string()},
                          {"corpus", files.corpus.string()},
                          {"dataset", files.dataset.string()},
                          {"truth", files.truth.string()}}
               .dump()
        << '\n';
  } else {
    out << "spec\t" << files.spec.string() << '\n'
        << "corpus\t" << files.corpus.string() << '\n'
        << "dataset\t" << files.dataset.string() << '\n'
        << "truth\t" << files.truth.string() << '\n';
  }
  return kExitOk;
}

struct ServeArgs {
  std::string memory, control, static_dir;
  std::string bind = "127.0.0.1:8080";
};

inline int cmd_serve(const ServeArgs& a, std::ostream& out) {
  ServerOptions opts;
  opts.memory = a.memory;
  opts.control = a.control;
  opts.static_dir = a.static_dir;
  std::tie(opts.host, opts.port) = parse_bind(a.bind);

  // Signals are taken synchronously so shutdown runs outside a handler.
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);

  TelemetryServer server(opts);
  const int port = server.bind();
  out << "listening on " << opts.host << ':' << port << std::endl;
  server.start();
  int sig = 0;
  sigwait(&set, &sig);
  server.stop();
  return kExitOk;
}

struct ProjectArgs {
  std::string memory, out_dir;
  bool json = false;
};

inline int cmd_project(const ProjectArgs& a, std::ostream& out) {
  const auto map = project_memory(MemoryStore(a.memory).read_all());
  std::filesystem::create_directories(a.out_dir);
  const auto matrix = std::filesystem::path(a.out_dir) / "embeddings.tsv";
  const auto proj = std::filesystem::path(a.out_dir) / "projection.tsv";
  write_embedding_matrix(matrix, map);
  write_projection(proj, map);
  if (a.json) {
    out << nlohmann::json{{"prompts", map.prompts.size()},
                          {"rank_deficient", map.rank_deficient},
                          {"embeddings", matrix.string()},
                          {"projection", proj.string()}}
               .dump()
        << '\n';
  } else {
    out << "prompts\t" << map.prompts.size() << '\n'
        << "embeddings\t" << matrix.string() << '\n'
        << "projection\t" << proj.string() << '\n';
    if (map.rank_deficient) out << "note\tall prompt embeddings coincide; points are at the origin\n";
  }
  return kExitOk;
}

}  // namespace cli_detail

/// Entry point shared by the tool and the tests. `args` excludes the program
/// name. `self_exe` is what `run --spawn-processes` launches.
inline int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err,
                   std::string self_exe = cli_detail::self_executable()) {
  using namespace cli_detail;
  CLI::App app{"Closed-loop discovery of text-derived multi-value features for CTR models", "featureloop"};
  app.require_subcommand(1);

  RunArgs run;
  auto* run_cmd = app.add_subcommand("run", "Run an agent fleet from a config file");
  run_cmd->add_option("--config", run.config, "Fleet config (key=value lines)")->required()->check(CLI::ExistingFile);
  run_cmd->add_flag("--spawn-processes", run.spawn_processes, "Run each agent as a child process");
  run_cmd->add_option("--only-agent", run.only_agent, "Run a single agent (1-based index)");
  run_cmd->add_flag("--json", run.json, "Machine-readable output");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Score one feature column or prompt against a dataset");
  eval_cmd->add_option("--world", ev.world, "World directory written by `simulate`");
  eval_cmd->add_option("--dataset", ev.dataset, "Dataset TSV");
  eval_cmd->add_option("--corpus", ev.corpus, "Corpus JSONL");
  eval_cmd->add_option("--column", ev.column, "Feature column TSV to score directly");
  eval_cmd->add_option("--prompt", ev.prompt, "File holding a user template to extract and score");
  eval_cmd->add_option("--backend", ev.backend, "sim or http")->check(CLI::IsMember({"sim", "http"}));
  eval_cmd->add_option("--eval-fraction", ev.eval_fraction, "Held-out tail fraction")->check(CLI::Range(0.0, 1.0));
  eval_cmd->add_option("--repeats", ev.repeats, "Training seeds to average")->check(CLI::PositiveNumber);
  eval_cmd->add_flag("--json", ev.json, "Machine-readable output");

  MemoryArgs mem;
  std::string mem_action;
  auto* memory_cmd = app.add_subcommand("memory", "Inspect or export a memory log");
  memory_cmd->add_option("action", mem_action, "top | bottom | export")
      ->required()
      ->check(CLI::IsMember({"top", "bottom", "export"}));
  memory_cmd->add_option("--memory,-m", mem.path, "Memory log path")->required();
  memory_cmd->add_option("-k", mem.k, "Number of records for top/bottom")->check(CLI::PositiveNumber);
  memory_cmd->add_flag("--json", mem.json, "JSON lines output");

  SimulateArgs simargs;
  auto* sim_cmd = app.add_subcommand("simulate", "Generate a synthetic world");
  sim_cmd->add_option("--out", simargs.out_dir, "Output directory")->required();
  sim_cmd->add_option("--seed", simargs.seed, "World seed");
  sim_cmd->add_option("--topics", simargs.topics, "Number of latent topics");
  sim_cmd->add_option("--docs", simargs.docs, "Number of documents");
  sim_cmd->add_option("--impressions", simargs.impressions, "Number of impressions");
  sim_cmd->add_option("--base-ctr", simargs.base_ctr, "Base click-through rate")->check(CLI::Range(0.0, 1.0));
  sim_cmd->add_flag("--json", simargs.json, "Machine-readable output");

  ServeArgs serve;
  auto* serve_cmd = app.add_subcommand("serve", "Run the telemetry and control service");
  serve_cmd->add_option("--memory", serve.memory, "Memory log path")->required();
  serve_cmd->add_option("--control", serve.control, "Control file (default <memory>.control)");
  serve_cmd->add_option("--static", serve.static_dir, "Dashboard asset directory")->check(CLI::ExistingDirectory);
  serve_cmd->add_option("--bind", serve.bind, "host:port");

  ProjectArgs proj;
  auto* project_cmd = app.add_subcommand("project", "Write prompt embeddings and a 2D projection");
  project_cmd->add_option("--memory", proj.memory, "Memory log path")->required();
  project_cmd->add_option("--out", proj.out_dir, "Output directory")->required();
  project_cmd->add_flag("--json", proj.json, "Machine-readable output");

  std::vector<std::string> storage{"featureloop"};
  storage.insert(storage.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  for (const auto& s : storage) argv.push_back(s.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    if (!app.get_subcommands().empty()) err << "run with " << app.get_subcommands().front()->get_name() << " --help for usage\n";
    return kExitUsage;
  }

  try {
    if (*run_cmd) return cmd_run(run, out, err, self_exe);
    if (*eval_cmd) return cmd_eval(ev, out, err);
    if (*memory_cmd) {
      if (!std::filesystem::exists(mem.path)) {
        err << "error: no memory log at " << mem.path << '\n';
        return kExitFailure;
      }
      const MemoryStore store(mem.path);
      if (mem_action == "top") print_records(out, store.top_k(mem.k), mem.json);
      else if (mem_action == "bottom") print_records(out, store.bottom_k(mem.k), mem.json);
      else print_records(out, store.read_all(), mem.json);
      return kExitOk;
    }
    if (*sim_cmd) return cmd_simulate(simargs, out);
    if (*serve_cmd) return cmd_serve(serve, out);
    if (*project_cmd) return cmd_project(proj, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace featureloop

#pragma once

#include <atomic>
#include <chrono>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <thread>

#include "featureloop/analysis.hpp"
#include "featureloop/control.hpp"
#include "featureloop/core.hpp"
#include "featureloop/llm.hpp"  // brings in httplib
#include "featureloop/memory.hpp"

namespace featureloop {

struct ServerOptions {
  std::filesystem::path memory;
  std::filesystem::path control;     // empty: <memory>.control
  std::filesystem::path static_dir;  // empty: built-in placeholder page
  std::string host = "127.0.0.1";
  int port = 8080;                   // 0 picks a free port
  std::chrono::milliseconds long_poll{25000};
  std::chrono::milliseconds poll_interval{50};
  std::size_t page_size = 500;
};

class ServerError : public Error {
 public:
  using Error::Error;
};

/// Splits "host:port"; throws ServerError on malformed input.
inline std::pair<std::string, int> parse_bind(const std::string& bind) {
  const auto colon = bind.rfind(':');
  if (colon == std::string::npos || colon == 0) throw ServerError("bind address must be host:port");
  try {
    std::size_t used = 0;
    const int port = std::stoi(bind.substr(colon + 1), &used);
    if (used != bind.size() - colon - 1 || port < 0 || port > 65535) throw ServerError("bad port");
    return {bind.substr(0, colon), port};
  } catch (const std::logic_error&) {
    throw ServerError("bad port in bind address " + bind);
  }
}

inline constexpr std::string_view kPlaceholderPage =
    "<!doctype html><html><head><meta charset=\"utf-8\"><title>featureloop</title></head>"
    "<body><h1>featureloop supervisor</h1><p>Dashboard assets are not installed. "
    "The JSON API is available under <code>/api/</code>.</p></body></html>";

/// Telemetry and control plane over the memory log and the control file.
/// GET endpoints only read; the only writes go to the control file.
class TelemetryServer {
 public:
  explicit TelemetryServer(ServerOptions opts)
      : opts_(std::move(opts)),
        memory_(opts_.memory, MemoryStore::Options{.durable = true, .auto_recover = false}),
        control_(opts_.control.empty() ? std::filesystem::path(opts_.memory.string() + ".control")
                                       : opts_.control) {
    routes();
  }

  ~TelemetryServer() { stop(); }

  /// Binds the listening socket; returns the bound port.
  int bind() {
    if (opts_.port == 0) {
      port_ = server_.bind_to_any_port(opts_.host);
    } else {
      port_ = server_.bind_to_port(opts_.host, opts_.port) ? opts_.port : -1;
    }
    if (port_ < 0) {
      throw ServerError("cannot bind " + opts_.host + ":" + std::to_string(opts_.port));
    }
    return port_;
  }

  // Blocks until stop().
  void run() { server_.listen_after_bind(); }

  void start() {
    if (port_ < 0) bind();
    thread_ = std::thread([this] { run(); });
    server_.wait_until_ready();
  }

  void stop() {
    stopping_ = true;
    server_.stop();
    if (thread_.joinable()) thread_.join();
  }

  int port() const { return port_; }
  const std::filesystem::path& control_path() const { return control_.path(); }

 private:
  static void send_json(httplib::Response& res, int status, const nlohmann::json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }

  static void send_error(httplib::Response& res, int status, std::string_view code, const std::string& message) {
    send_json(res, status, {{"error", code}, {"message", message}});
  }

  template <class Fn>
  auto guarded(Fn fn) {
    return [fn](const httplib::Request& req, httplib::Response& res) {
      try {
        fn(req, res);
      } catch (const StorageError& e) {
        send_error(res, 503, "StorageUnavailable", e.what());
      } catch (const std::exception& e) {
        send_error(res, 500, "Internal", e.what());
      }
    };
  }

  std::set<std::string> known_agents() const {
    std::set<std::string> out;
    for (const auto& [id, _] : control_.state().agents) out.insert(id);
    for (const auto& r : memory_.read_all()) out.insert(r.agent_id);
    return out;
  }

  nlohmann::json ack(std::int64_t control_seq, const std::string& agent_id) const {
    nlohmann::json body{{"accepted", true},
                        {"control_seq", control_seq},
                        {"effective_after_seq", memory_.last_seq()}};
    if (!agent_id.empty()) {
      const auto a = control_.state().agent(agent_id);
      body["agent_id"] = agent_id;
      body["state"] = {{"paused", a.paused},
                       {"temperature", a.temperature ? nlohmann::json(*a.temperature) : nlohmann::json()},
                       {"epsilon", a.epsilon ? nlohmann::json(*a.epsilon) : nlohmann::json()}};
    }
    return body;
  }

  void routes() {
    server_.Get("/api/records", guarded([this](const httplib::Request& req, httplib::Response& res) {
      std::int64_t since = -1;
      if (req.has_param("since")) {
        const std::string s = req.get_param_value("since");
        try {
          std::size_t used = 0;
          since = std::stoll(s, &used);
          if (used != s.size() || since < -1) throw std::invalid_argument(s);
        } catch (const std::logic_error&) {
          send_error(res, 400, "BadCursor", "since must be an integer >= -1");
          return;
        }
      }
      bool wait = false;
      if (req.has_param("wait")) {
        const std::string w = req.get_param_value("wait");
        if (w == "true" || w == "1") wait = true;
        else if (w == "false" || w == "0") wait = false;
        else {
          send_error(res, 400, "BadRequest", "wait must be true or false");
          return;
        }
      }
      auto records = memory_.read_since(since);
      const auto deadline = std::chrono::steady_clock::now() + opts_.long_poll;
      while (wait && records.empty() && !stopping_ && std::chrono::steady_clock::now() < deadline) {
        std::this_thread::sleep_for(opts_.poll_interval);
        records = memory_.read_since(since);
      }
      const bool more = records.size() > opts_.page_size;
      if (more) records.resize(opts_.page_size);
      nlohmann::json arr = nlohmann::json::array();
      for (const auto& r : records) arr.push_back(to_json(r));
      send_json(res, 200, {{"records", std::move(arr)},
                           {"next", records.empty() ? since : records.back().seq},
                           {"more", more}});
    }));

    server_.Get("/api/agents", guarded([this](const httplib::Request&, httplib::Response& res) {
      const auto state = control_.state();
      const auto records = memory_.read_all();
      std::map<std::string, nlohmann::json> agents;
      for (const auto& id : known_agents()) {
        const auto a = state.agent(id);
        agents[id] = {{"agent_id", id},
                      {"records", 0},
                      {"ok_records", 0},
                      {"best_score", nullptr},
                      {"last_seq", nullptr},
                      {"paused", a.paused},
                      {"temperature", a.temperature ? nlohmann::json(*a.temperature) : nlohmann::json()},
                      {"epsilon", a.epsilon ? nlohmann::json(*a.epsilon) : nlohmann::json()}};
      }
      for (const auto& r : records) {
        auto& a = agents[r.agent_id];
        a["records"] = a["records"].get<int>() + 1;
        a["last_seq"] = r.seq;
        if (r.status == Status::ok) {
          a["ok_records"] = a["ok_records"].get<int>() + 1;
          if (a["best_score"].is_null() || r.relative_score > a["best_score"].get<double>()) {
            a["best_score"] = r.relative_score;
          }
        }
      }
      nlohmann::json arr = nlohmann::json::array();
      for (auto& [_, a] : agents) arr.push_back(std::move(a));
      send_json(res, 200, {{"agents", std::move(arr)}});
    }));

    server_.Get("/api/histogram", guarded([this](const httplib::Request& req, httplib::Response& res) {
      std::string agent = req.has_param("agent") ? req.get_param_value("agent") : "all";
      std::size_t bins = 20;
      if (req.has_param("bins")) {
        try {
          const long v = std::stol(req.get_param_value("bins"));
          if (v < 1 || v > 10000) throw std::out_of_range("bins");
          bins = static_cast<std::size_t>(v);
        } catch (const std::logic_error&) {
          send_error(res, 400, "BadRequest", "bins must be an integer in [1, 10000]");
          return;
        }
      }
      const auto hist = score_histogram(memory_.read_all(), agent == "all" ? "" : agent, bins);
      nlohmann::json arr = nlohmann::json::array();
      std::size_t total = 0;
      for (const auto& b : hist) {
        arr.push_back({{"low", b.low}, {"high", b.high}, {"count", b.count}});
        total += b.count;
      }
      send_json(res, 200, {{"agent", agent}, {"bins", std::move(arr)}, {"total", total}});
    }));

    server_.Get("/api/projection", guarded([this](const httplib::Request&, httplib::Response& res) {
      const auto map = project_memory(memory_.read_all());
      nlohmann::json arr = nlohmann::json::array();
      for (const auto& p : map.prompts) {
        arr.push_back({{"prompt_id", p.prompt_id},
                       {"agent_id", p.agent_id},
                       {"score", p.relative_score},
                       {"x", p.x},
                       {"y", p.y}});
      }
      send_json(res, 200, {{"points", std::move(arr)}, {"rank_deficient", map.rank_deficient}});
    }));

    server_.Post(R"(/api/control/agents/([^/]+)/(pause|resume|params))",
                 guarded([this](const httplib::Request& req, httplib::Response& res) {
      const std::string agent = req.matches[1];
      const std::string action = req.matches[2];
      if (!known_agents().count(agent)) {
        send_error(res, 404, "UnknownAgent", "no agent named " + agent);
        return;
      }
      ControlCommand cmd;
      cmd.agent_id = agent;
      if (action == "pause") {
        cmd.kind = ControlKind::pause;
      } else if (action == "resume") {
        cmd.kind = ControlKind::resume;
      } else {
        cmd.kind = ControlKind::params;
        const auto body = nlohmann::json::parse(req.body, nullptr, false);
        if (body.is_discarded() || !body.is_object()) {
          send_error(res, 400, "BadRequest", "body must be a JSON object");
          return;
        }
        try {
          if (body.contains("temperature") && !body["temperature"].is_null()) {
            cmd.temperature = body["temperature"].get<double>();
          }
          if (body.contains("epsilon") && !body["epsilon"].is_null()) {
            cmd.epsilon = body["epsilon"].get<double>();
          }
        } catch (const nlohmann::json::exception&) {
          send_error(res, 422, "InvalidParams", "temperature and epsilon must be numbers");
          return;
        }
        if (!cmd.temperature && !cmd.epsilon) {
          send_error(res, 422, "InvalidParams", "expected temperature and/or epsilon");
          return;
        }
        if (cmd.temperature && !(*cmd.temperature >= 0.0 && *cmd.temperature <= 2.0)) {
          send_error(res, 422, "InvalidParams", "temperature must be in [0, 2]");
          return;
        }
        if (cmd.epsilon && !(*cmd.epsilon >= 0.0 && *cmd.epsilon <= 1.0)) {
          send_error(res, 422, "InvalidParams", "epsilon must be in [0, 1]");
          return;
        }
      }
      const auto seq = control_.append(cmd);
      send_json(res, 200, ack(seq, agent));
    }));

    server_.Post("/api/control/seeds", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto body = nlohmann::json::parse(req.body, nullptr, false);
      if (body.is_discarded() || !body.is_object() || !body.contains("user_template") ||
          !body["user_template"].is_string()) {
        send_error(res, 400, "BadRequest", "body must be {\"user_template\": \"...\"}");
        return;
      }
      const std::string text = body["user_template"].get<std::string>();
      try {
        validate_template(text);
      } catch (const TemplateError& e) {
        send_error(res, 422,
                   e.kind() == TemplateError::Kind::MissingPlaceholder ? "MissingPlaceholder"
                                                                       : "DuplicatePlaceholder",
                   e.what());
        return;
      }
      ControlCommand cmd;
      cmd.kind = ControlKind::seed;
      cmd.user_template = text;
      const auto seq = control_.append(cmd);
      auto a = ack(seq, "");
      a["prompt_id"] = content_hash(text);
      send_json(res, 200, a);
    }));

    if (!opts_.static_dir.empty()) {
      if (!server_.set_mount_point("/", opts_.static_dir.string())) {
        throw ServerError("static directory not found: " + opts_.static_dir.string());
      }
    } else {
      server_.Get("/", [](const httplib::Request&, httplib::Response& res) {
        res.set_content(std::string(kPlaceholderPage), "text/html");
      });
    }
  }

  ServerOptions opts_;
  MemoryStore memory_;
  ControlLog control_;
  httplib::Server server_;
  std::thread thread_;
  std::atomic<bool> stopping_{false};
  int port_ = -1;
};

}  // namespace featureloop

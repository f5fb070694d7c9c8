#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "featureloop/core.hpp"
#include "featureloop/sealed_log.hpp"

namespace featureloop {

enum class ControlKind { register_agent, pause, resume, params, seed };

inline std::string_view to_string(ControlKind k) {
  switch (k) {
    case ControlKind::register_agent: return "register";
    case ControlKind::pause: return "pause";
    case ControlKind::resume: return "resume";
    case ControlKind::params: return "params";
    case ControlKind::seed: return "seed";
  }
  return "register";
}

inline std::optional<ControlKind> parse_control_kind(std::string_view s) {
  if (s == "register") return ControlKind::register_agent;
  if (s == "pause") return ControlKind::pause;
  if (s == "resume") return ControlKind::resume;
  if (s == "params") return ControlKind::params;
  if (s == "seed") return ControlKind::seed;
  return std::nullopt;
}

struct ControlCommand {
  std::int64_t seq = -1;
  ControlKind kind = ControlKind::register_agent;
  std::string agent_id;  // empty for seed commands
  std::optional<double> temperature;
  std::optional<double> epsilon;
  std::string user_template;
  std::string created_at;
};

struct AgentControl {
  bool paused = false;
  std::optional<double> temperature;
  std::optional<double> epsilon;
};

struct SeedCommand {
  std::int64_t seq;
  std::string user_template;
};

// The fold of every command in the control file.
struct ControlState {
  std::map<std::string, AgentControl> agents;  // registered or addressed agents
  std::vector<SeedCommand> seeds;
  std::int64_t last_seq = -1;

  AgentControl agent(const std::string& id) const {
    auto it = agents.find(id);
    return it == agents.end() ? AgentControl{} : it->second;
  }
};

inline std::string encode_command(const ControlCommand& c) {
  std::string body = "{\"seq\":" + std::to_string(c.seq);
  body += ",\"kind\":" + json_string(to_string(c.kind));
  if (!c.agent_id.empty()) body += ",\"agent_id\":" + json_string(c.agent_id);
  if (c.temperature) body += ",\"temperature\":" + json_number(*c.temperature);
  if (c.epsilon) body += ",\"epsilon\":" + json_number(*c.epsilon);
  if (c.kind == ControlKind::seed) body += ",\"user_template\":" + json_string(c.user_template);
  body += ",\"created_at\":" + json_string(c.created_at);
  return seal_line(std::move(body));
}

inline std::optional<ControlCommand> decode_command(const nlohmann::json& j) {
  try {
    ControlCommand c;
    c.seq = j.at("seq").get<std::int64_t>();
    auto kind = parse_control_kind(j.at("kind").get<std::string>());
    if (!kind) return std::nullopt;
    c.kind = *kind;
    c.agent_id = j.value("agent_id", std::string{});
    if (j.contains("temperature")) c.temperature = j.at("temperature").get<double>();
    if (j.contains("epsilon")) c.epsilon = j.at("epsilon").get<double>();
    c.user_template = j.value("user_template", std::string{});
    c.created_at = j.value("created_at", std::string{});
    return c;
  } catch (const nlohmann::json::exception&) {
    return std::nullopt;
  }
}

/// Append-only control file written by the supervisor service and polled by
/// agents between generations. Same sealed-line format and locking as the
/// memory log.
class ControlLog {
 public:
  explicit ControlLog(std::filesystem::path path) : log_(std::move(path), true) {}

  const std::filesystem::path& path() const { return log_.path(); }

  std::int64_t append(ControlCommand cmd) {
    return log_.with_lock([&] {
      const auto scan = log_.scan(0);
      auto commands = decode(scan);
      const std::uint64_t valid_end = commands.second;
      if (!scan.missing && scan.file_size > valid_end) log_.truncate(valid_end);
      cmd.seq = static_cast<std::int64_t>(commands.first.size());
      if (cmd.created_at.empty()) cmd.created_at = now_rfc3339();
      log_.write_line(encode_command(cmd));
      return cmd.seq;
    });
  }

  std::vector<ControlCommand> commands() const { return decode(log_.scan(0)).first; }

  ControlState state() const {
    ControlState st;
    for (const auto& c : commands()) {
      st.last_seq = c.seq;
      switch (c.kind) {
        case ControlKind::register_agent: st.agents[c.agent_id]; break;
        case ControlKind::pause: st.agents[c.agent_id].paused = true; break;
        case ControlKind::resume: st.agents[c.agent_id].paused = false; break;
        case ControlKind::params: {
          auto& a = st.agents[c.agent_id];
          if (c.temperature) a.temperature = c.temperature;
          if (c.epsilon) a.epsilon = c.epsilon;
          break;
        }
        case ControlKind::seed: st.seeds.push_back({c.seq, c.user_template}); break;
      }
    }
    return st;
  }

 private:
  static std::pair<std::vector<ControlCommand>, std::uint64_t> decode(const SealedLog::Scan& scan) {
    std::vector<ControlCommand> out;
    std::uint64_t end = 0;
    for (const auto& e : scan.entries) {
      auto c = decode_command(e.object);
      if (!c || c->seq != static_cast<std::int64_t>(out.size())) break;
      out.push_back(std::move(*c));
      end = e.end_offset;
    }
    return {std::move(out), end};
  }

  SealedLog log_;
};

}  // namespace featureloop

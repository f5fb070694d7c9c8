#pragma once

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <functional>
#include <memory>
#include <mutex>
#include <random>
#include <string>
#include <thread>

#ifndef CPPHTTPLIB_OPENSSL_SUPPORT
#define CPPHTTPLIB_OPENSSL_SUPPORT
#endif
#include <httplib.h>
#include <json.hpp>

#include "featureloop/core.hpp"

namespace featureloop {

struct ChatRequest {
  std::string system;
  std::string user;
  double temperature = 0.0;
  int max_output_tokens = 512;
  std::string model;
};

struct ChatResponse {
  std::string text;
  std::int64_t input_tokens = 0;
  std::int64_t output_tokens = 0;
  std::chrono::milliseconds latency{0};
};

class LlmError : public Error {
 public:
  enum class Kind { RateLimited, Transport, Timeout, MalformedResponse, AuthFailed, InvalidRequest };
  LlmError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

inline void check_request(const ChatRequest& req) {
  if (req.user.empty()) throw LlmError(LlmError::Kind::InvalidRequest, "empty user message");
  if (!(req.temperature >= 0.0 && req.temperature <= 2.0)) {
    throw LlmError(LlmError::Kind::InvalidRequest, "temperature outside [0, 2]");
  }
  if (req.max_output_tokens <= 0) {
    throw LlmError(LlmError::Kind::InvalidRequest, "max_output_tokens must be positive");
  }
}

class Backend {
 public:
  virtual ~Backend() = default;
  virtual ChatResponse complete(const ChatRequest& request) = 0;
};

inline std::int64_t rough_token_count(std::string_view text) {
  return static_cast<std::int64_t>(text.size() / 4 + 1);
}

// ---------------------------------------------------------------------------
// Simulated backend

/// Maps (seed, request) to output text. Must be a pure function; it may
/// throw LlmError to simulate failures.
using Behavior = std::function<std::string(std::uint64_t seed, const ChatRequest&)>;

class SimulatedBackend final : public Backend {
 public:
  SimulatedBackend(std::uint64_t seed, Behavior behavior)
      : seed_(seed), behavior_(std::move(behavior)) {}

  ChatResponse complete(const ChatRequest& request) override {
    check_request(request);
    calls_.fetch_add(1, std::memory_order_relaxed);
    ChatResponse resp;
    resp.text = behavior_(seed_, request);
    resp.input_tokens = rough_token_count(request.system) + rough_token_count(request.user);
    resp.output_tokens = rough_token_count(resp.text);
    return resp;
  }

  std::uint64_t seed() const { return seed_; }
  std::size_t calls() const { return calls_.load(std::memory_order_relaxed); }

 private:
  std::uint64_t seed_;
  Behavior behavior_;
  std::atomic<std::size_t> calls_{0};
};

inline std::unique_ptr<SimulatedBackend> simulated_backend(std::uint64_t seed, Behavior behavior) {
  return std::make_unique<SimulatedBackend>(seed, std::move(behavior));
}

inline Behavior echo_behavior() {
  return [](std::uint64_t, const ChatRequest& req) { return req.user; };
}

// ---------------------------------------------------------------------------
// Rate limiting

/// Token bucket: `rate` tokens per second, holding at most `burst`.
/// acquire() blocks until a token is available. Safe for concurrent callers.
class TokenBucket {
 public:
  using SteadyClock = std::chrono::steady_clock;

  TokenBucket(double rate, double burst)
      : rate_(rate), burst_(std::max(1.0, burst)), tokens_(burst_), last_(SteadyClock::now()) {
    if (!(rate > 0.0)) throw Error("rate limit must be positive");
  }

  void acquire() {
    std::unique_lock lock(mutex_);
    for (;;) {
      const auto now = SteadyClock::now();
      const std::chrono::duration<double> dt = now - last_;
      tokens_ = std::min(burst_, tokens_ + dt.count() * rate_);
      last_ = now;
      if (tokens_ >= 1.0) {
        tokens_ -= 1.0;
        return;
      }
      const double wait = (1.0 - tokens_) / rate_;
      lock.unlock();
      std::this_thread::sleep_for(std::chrono::duration<double>(wait));
      lock.lock();
    }
  }

  double rate() const { return rate_; }
  double burst() const { return burst_; }

 private:
  double rate_;
  double burst_;
  double tokens_;
  SteadyClock::time_point last_;
  std::mutex mutex_;
};

// ---------------------------------------------------------------------------
// HTTP backend (chat-completions dialect)

struct RetryPolicy {
  int max_attempts = 5;
  std::chrono::milliseconds base_delay{1000};
  double factor = 2.0;
};

struct HttpBackendConfig {
  std::string api_base;  // e.g. https://host/v1
  std::string api_key;
  std::string model;
  double requests_per_second = 4.0;
  double burst = 1.0;
  std::chrono::seconds timeout{20};
  RetryPolicy retry;
  std::uint64_t jitter_seed = 0;
  // Replaces sleeping between attempts; tests inject a recorder.
  std::function<void(std::chrono::milliseconds)> sleeper;
};

enum class BackendRole { sentinel, architect };

/// Reads FL_API_BASE, FL_API_KEY, FL_RPS and FL_SENTINEL_MODEL or
/// FL_ARCHITECT_MODEL. Architect calls get a 60s timeout, sentinel calls 20s.
inline HttpBackendConfig http_config_from_env(BackendRole role) {
  auto env = [](const char* name, const char* fallback) {
    const char* v = std::getenv(name);
    return std::string(v && *v ? v : fallback);
  };
  HttpBackendConfig cfg;
  cfg.api_base = env("FL_API_BASE", "");
  cfg.api_key = env("FL_API_KEY", "");
  cfg.requests_per_second = std::stod(env("FL_RPS", "4"));
  if (role == BackendRole::architect) {
    cfg.model = env("FL_ARCHITECT_MODEL", "");
    cfg.timeout = std::chrono::seconds(60);
  } else {
    cfg.model = env("FL_SENTINEL_MODEL", "");
    cfg.timeout = std::chrono::seconds(20);
  }
  return cfg;
}

class HttpBackend final : public Backend {
 public:
  explicit HttpBackend(HttpBackendConfig cfg)
      : cfg_(std::move(cfg)),
        bucket_(cfg_.requests_per_second, cfg_.burst),
        jitter_(cfg_.jitter_seed) {
    if (cfg_.api_base.empty()) throw Error("HTTP backend needs an API base URL");
    split_base(cfg_.api_base);
  }

  ChatResponse complete(const ChatRequest& request) override {
    check_request(request);
    const std::string body = request_body(request);
    const auto started = std::chrono::steady_clock::now();

    LlmError last(LlmError::Kind::Transport, "no attempt made");
    for (int attempt = 0; attempt < cfg_.retry.max_attempts; ++attempt) {
      if (attempt > 0) backoff(attempt);
      bucket_.acquire();
      attempts_.fetch_add(1, std::memory_order_relaxed);

      httplib::Client client(origin_);
      client.set_connection_timeout(cfg_.timeout);
      client.set_read_timeout(cfg_.timeout);
      client.set_write_timeout(cfg_.timeout);
      httplib::Headers headers;
      if (!cfg_.api_key.empty()) headers.emplace("Authorization", "Bearer " + cfg_.api_key);

      auto res = client.Post(path_, headers, body, "application/json");
      if (!res) {
        const auto err = res.error();
        const bool timeout = err == httplib::Error::ConnectionTimeout || err == httplib::Error::Read;
        last = LlmError(timeout ? LlmError::Kind::Timeout : LlmError::Kind::Transport,
                        "request failed: " + httplib::to_string(err));
        continue;
      }
      const int status = res->status;
      if (status == 401 || status == 403) {
        throw LlmError(LlmError::Kind::AuthFailed, "authentication failed (HTTP " +
                                                       std::to_string(status) + ")");
      }
      if (status == 429) {
        last = LlmError(LlmError::Kind::RateLimited, "rate limited (HTTP 429)");
        continue;
      }
      if (status >= 500 || status == 408) {
        last = LlmError(LlmError::Kind::Transport, "server error (HTTP " +
                                                       std::to_string(status) + ")");
        continue;
      }
      if (status != 200) {
        throw LlmError(LlmError::Kind::Transport, "unexpected HTTP " + std::to_string(status));
      }
      ChatResponse resp = parse_response(res->body);
      resp.latency = std::chrono::duration_cast<std::chrono::milliseconds>(
          std::chrono::steady_clock::now() - started);
      return resp;
    }
    throw last;
  }

  // Total HTTP requests issued so far.
  std::size_t attempts() const { return attempts_.load(std::memory_order_relaxed); }

  static std::string request_body(const ChatRequest& r) {
    nlohmann::ordered_json j;
    j["model"] = r.model;
    j["messages"] = nlohmann::ordered_json::array(
        {{{"role", "system"}, {"content", r.system}}, {{"role", "user"}, {"content", r.user}}});
    j["temperature"] = r.temperature;
    j["max_tokens"] = r.max_output_tokens;
    return j.dump();
  }

  static ChatResponse parse_response(const std::string& body) {
    auto j = nlohmann::json::parse(body, nullptr, false);
    if (j.is_discarded()) throw LlmError(LlmError::Kind::MalformedResponse, "response is not JSON");
    try {
      ChatResponse resp;
      resp.text = j.at("choices").at(0).at("message").at("content").get<std::string>();
      if (auto u = j.find("usage"); u != j.end() && u->is_object()) {
        resp.input_tokens = u->value("prompt_tokens", std::int64_t{0});
        resp.output_tokens = u->value("completion_tokens", std::int64_t{0});
      }
      return resp;
    } catch (const nlohmann::json::exception& e) {
      throw LlmError(LlmError::Kind::MalformedResponse,
                     std::string("missing choices[0].message.content: ") + e.what());
    }
  }

 private:
  void split_base(const std::string& base) {
    const auto scheme = base.find("://");
    const auto path_start = base.find('/', scheme == std::string::npos ? 0 : scheme + 3);
    origin_ = path_start == std::string::npos ? base : base.substr(0, path_start);
    std::string prefix = path_start == std::string::npos ? "" : base.substr(path_start);
    while (!prefix.empty() && prefix.back() == '/') prefix.pop_back();
    path_ = prefix + "/chat/completions";
  }

  // Full jitter: uniform in [0, base * factor^(attempt-1)].
  void backoff(int attempt) {
    double cap = static_cast<double>(cfg_.retry.base_delay.count());
    for (int i = 1; i < attempt; ++i) cap *= cfg_.retry.factor;
    std::chrono::milliseconds delay;
    {
      std::lock_guard guard(jitter_mutex_);
      delay = std::chrono::milliseconds(
          static_cast<std::int64_t>(std::uniform_real_distribution<double>(0.0, cap)(jitter_)));
    }
    if (cfg_.sleeper) {
      cfg_.sleeper(delay);
    } else {
      std::this_thread::sleep_for(delay);
    }
  }

  HttpBackendConfig cfg_;
  TokenBucket bucket_;
  std::string origin_;
  std::string path_;
  std::mt19937_64 jitter_;
  std::mutex jitter_mutex_;
  std::atomic<std::size_t> attempts_{0};
};

}  // namespace featureloop

#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>

#include "sortsim/agents.hpp"
#include "sortsim/learn.hpp"
#include "sortsim/model.hpp"
#include "sortsim/prefgen.hpp"
#include "sortsim/sim.hpp"

namespace sortsim {

// Session-oriented HTTP API.
//
//   POST /sessions                  {"seed"?, "config"?, "scenario"?} -> {"session_id", ...state}
//   GET  /sessions/{id}/state       {"session_id", "tick", "done", "state_json", "state_text"}
//   GET  /sessions/{id}/suggestions {"tick", "horizon", "continuation", "candidates": [A, B]}
//   POST /sessions/{id}/action      {"choice": "A"|"B"} or {"action": [...]}, optional "rationale"
//   GET  /sessions/{id}/trace       shift-log records plus the session's preference pairs
//   GET  /preferences/export        JSON-Lines preference dataset (all sessions, append order)
//
// Errors: HTTP 4xx with {"code", "message", "details"}.

struct ServiceConfig {
  SimConfig sim = SimConfig::defaults();
  ScenarioParams scenario{};
  std::optional<FactorizedPolicy> policy;  // first suggestion source; no_reallocation when absent
  GreedyParams greedy{};
  int horizon = 6;
  Continuation continuation = Continuation::kNoReallocation;
  std::string host = "127.0.0.1";
  int port = 8080;
};

/// File keys: "sim", "scenario", "greedy", "horizon", "continuation", "host",
/// "port", "checkpoint" (path to a policy checkpoint). Missing keys keep defaults.
ServiceConfig service_config_from_json(const json& j);

/// SORTSIM_PORT overrides `configured` when set to a valid port number.
int resolve_port(int configured);

class ApiError : public Error {
 public:
  ApiError(int status, std::string code, const std::string& message, json details = json::object())
      : Error(message), status_(status), code_(std::move(code)), details_(std::move(details)) {}
  int status() const { return status_; }
  const std::string& code() const { return code_; }
  const json& details() const { return details_; }
  json body() const { return {{"code", code_}, {"message", what()}, {"details", details_}}; }

 private:
  int status_;
  std::string code_;
  json details_;
};

/// Session store plus request handlers. The handlers are callable without a
/// socket; serve() exposes them over HTTP. Every handler throws ApiError.
class Service {
 public:
  explicit Service(ServiceConfig config);
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  json create_session(const json& body);
  json get_state(const std::string& session_id);
  json suggestions(const std::string& session_id);
  json submit(const std::string& session_id, const json& body);
  json trace(const std::string& session_id);
  std::string export_preferences();

  /// Binds host:port (port 0 picks a free one) and serves on a background
  /// thread. Returns the bound port. Throws UsageError when binding fails.
  int start(const std::string& host, int port);
  /// Blocks until stop() is called or the listener fails.
  void wait();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace sortsim

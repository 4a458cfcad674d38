#pragma once

#include <memory>
#include <string>

#include "sortsim/agents.hpp"
#include "sortsim/errors.hpp"

namespace sortsim {

// External-policy bridge.
//
// Request (one JSON object): {"state_text", "state_json", "task"}.
// Reply: a JSON array of {"worker_id", "to_line", "to_stage"}, or a JSON
// string holding free text that contains such an array.
//
// Endpoints:
//   exec:<shell command>  long-lived child process; one request line on its
//                         stdin, one reply line on its stdout
//   http://host[:port]/path  HTTP POST of the request, reply in the body

struct BridgeOptions {
  double timeout_seconds = 30.0;
  bool abort_on_error = false;  // throw BridgeError instead of falling back to no-op
};

class BridgeError : public DataError {
 public:
  BridgeError(std::string kind, const std::string& message) : DataError(message), kind_(std::move(kind)) {}
  /// timeout, transport, malformed_reply or invalid_action.
  const std::string& kind() const { return kind_; }

 private:
  std::string kind_;
};

class BridgeClient {
 public:
  explicit BridgeClient(std::string endpoint, BridgeOptions options = {});
  ~BridgeClient();
  BridgeClient(const BridgeClient&) = delete;
  BridgeClient& operator=(const BridgeClient&) = delete;

  /// Any failure yields the empty action plus a "bridge_error" event, unless
  /// abort_on_error is set.
  PolicyDecision decide(const SystemState& state, const SimConfig& config);

  /// One raw request/reply exchange. Throws BridgeError.
  std::string exchange(const std::string& request_line);

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

/// Single-shot convenience wrapper around BridgeClient.
PolicyDecision bridge_policy(const std::string& endpoint, const SystemState& state, const SimConfig& config,
                             const BridgeOptions& options = {});

}  // namespace sortsim

#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

namespace sortsim {

using json = nlohmann::json;

inline constexpr int kStages = 3;
inline constexpr int kBuffers = 4;
inline constexpr int kConfigSchemaVersion = 1;
inline constexpr int kLogSchemaVersion = 1;

// Buffer roles on every line. Stage s (0-based) reads from buffer s and writes
// to buffer s + 1.
enum BufferRole : int { kInbound = 0, kStage12 = 1, kStage23 = 2, kOutbound = 3 };

enum class JamMode { kDeterministic, kStochastic };

using StageArray = std::array<double, kStages>;
using BufferArray = std::array<double, kBuffers>;

/// Dynamics parameters. Lines and stages are 0-based in C++; every external
/// representation (JSON actions, state text) is 1-based.
struct SimConfig {
  int n_lines = 4;
  std::array<int, kStages> slot_capacity{4, 6, 2};
  StageArray base_rate{6.0, 4.0, 12.0};
  std::vector<BufferArray> buffer_capacity;  // [line][buffer]
  std::vector<double> arrival_rate;          // [line], units per tick

  // Arrivals follow arrival_rate[l] * (1 + amplitude * sin(2 pi t / period + l pi / 2)).
  double arrival_amplitude = 0.3;
  int arrival_period = 50;

  double throttle_knee = 0.7;
  double throttle_floor = 0.2;
  double jam_coupling = 0.15;
  JamMode jam_mode = JamMode::kDeterministic;
  int jam_duration = 2;
  double jam_hazard_scale = 0.05;
  double dispatch_rate = 30.0;
  int cooldown = 1;
  int tick_minutes = 5;
  int episode_length = 50;

  // Reporting label ("Buffer State k") for each buffer role. B_23 holds
  // completed stage-2 output waiting for stage 3, which is label 2.
  std::array<int, kBuffers> buffer_state_labels{1, 3, 2, 4};

  /// Default configuration with per-line arrays filled in.
  static SimConfig defaults(int n_lines = 4);
};

/// Field-level validation; empty when the config satisfies all invariants.
std::vector<std::string> validate_config(const SimConfig& config);

struct Position {
  int line = -1;  // -1 = off floor
  int stage = -1;

  bool on_floor() const { return line >= 0; }
  friend bool operator==(const Position&, const Position&) = default;
};

struct SystemState {
  int tick = 0;
  std::vector<BufferArray> buffers;  // [line][buffer]
  std::vector<double> external_backlog;
  std::vector<Position> assignment;       // indexed by worker; id is "w<index+1>"
  std::vector<int> cooldown_remaining;    // per worker
  std::vector<int> jam_remaining;         // per line
  double cumulative_output = 0.0;
  double cumulative_arrivals = 0.0;
  std::vector<StageArray> last_tick_throughput;  // [line][stage]

  int n_lines() const { return static_cast<int>(buffers.size()); }
  int n_workers() const { return static_cast<int>(assignment.size()); }
  int assigned(int line, int stage) const;
  bool line_active(int line) const;

  friend bool operator==(const SystemState&, const SystemState&) = default;
};

/// Empty state (no workers, empty buffers) shaped for the config.
SystemState empty_state(const SimConfig& config, int n_workers = 0);

std::string worker_id(int index);
/// Inverse of worker_id; nullopt for anything not of the form "w<k>", k >= 1.
std::optional<int> parse_worker_id(const std::string& id);

struct Move {
  std::string worker_id;
  int to_line = -1;  // 0-based; -1/-1 sends the worker off floor
  int to_stage = -1;

  friend bool operator==(const Move&, const Move&) = default;
};

struct Action {
  std::vector<Move> moves;

  bool empty() const { return moves.empty(); }
  /// Moves sorted by worker index (unknown ids last, lexicographic).
  Action canonical() const;
  friend bool operator==(const Action&, const Action&) = default;
};

struct Event {
  std::string kind;  // jam_onset, jam_clear, overflow_to_backlog, action_rejected, ...
  int line = -1;
  std::string detail;
  double amount = 0.0;
};

struct StepResult {
  SystemState next_state;
  double reward = 0.0;
  std::vector<StageArray> per_stage_flow;  // [line][stage]
  std::vector<Event> events;
};

struct TickRecord {
  int tick = 0;
  SystemState state;  // snapshot before the step
  Action action;      // action actually applied
  double reward = 0.0;
  std::vector<StageArray> stage_flows;
  std::vector<BufferArray> buffer_levels;  // after the step
  std::vector<Event> events;
};

struct ShiftLog {
  std::string shift_id;
  std::uint64_t seed = 0;
  SystemState initial;
  std::vector<TickRecord> ticks;
  SystemState final_state;
  json meta = json::object();

  double total_reward() const;
};

// JSON conversions. Actions use the external (1-based) wire schema
// {"worker_id", "to_line", "to_stage"}.
json to_json(const SimConfig& config);
SimConfig config_from_json(const json& j);
json to_json(const SystemState& state);
SystemState state_from_json(const json& j);
json to_json(const Move& move);
json to_json(const Action& action);
Action action_from_json(const json& j);
json to_json(const Event& event);
Event event_from_json(const json& j);

/// FNV-1a 64 over a canonical binary encoding, rendered as 16 hex digits.
std::string state_digest(const SystemState& state);
std::string config_digest(const SimConfig& config);

// ShiftLog JSON-Lines: one header record, then one record per tick with
// {tick, state_digest, action, reward, stage_flows, buffer_levels, events, state}.
std::string shift_log_to_jsonl(const ShiftLog& log);
ShiftLog shift_log_from_jsonl(const std::string& text);

/// Several logs back to back; each header record starts a new log.
std::string corpus_to_jsonl(const std::vector<ShiftLog>& logs);
std::vector<ShiftLog> corpus_from_jsonl(const std::string& text);

}  // namespace sortsim

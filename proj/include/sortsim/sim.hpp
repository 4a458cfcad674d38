#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "sortsim/errors.hpp"
#include "sortsim/model.hpp"

namespace sortsim {

struct Violation {
  std::string kind;  // unknown_worker, duplicate_worker, invalid_destination, self_move, capacity
  std::string worker_id;
  std::string message;
};

class InvalidActionError : public UsageError {
 public:
  explicit InvalidActionError(std::vector<Violation> v);
  const std::vector<Violation>& violations() const { return violations_; }

 private:
  std::vector<Violation> violations_;
};

std::string describe(const std::vector<Violation>& violations);

/// Empty iff the action can be applied to the state.
std::vector<Violation> validate_action(const SystemState& state, const Action& action,
                                       const SimConfig& config);

/// Piecewise-linear slowdown: 1 up to the knee, then linear down to the floor
/// at fill = 1. Fill is clamped to [0, 1].
double throttle(double fill, const SimConfig& config);

/// Workers on (line, stage) that are not cooling down.
int active_workers(const SystemState& state, int line, int stage);

/// Stage-1 multiplier from adjacent-line interaction (deterministic mode) or
/// an ongoing jam (stochastic mode). Other stages always get 1.
double jam_multiplier(const SystemState& state, const SimConfig& config, int line, int stage);

/// Units the stage would move given the buffers in `state` and `workers`
/// productive workers: min(capacity, upstream supply, downstream space).
double stage_flow(const SystemState& state, const SimConfig& config, int line, int stage, int workers);

/// Units arriving at B_in of `line` during tick `tick`.
double arrivals_at(const SimConfig& config, int line, int tick);

/// One tick. Throws InvalidActionError if validate_action reports anything.
/// rng_seed is required in stochastic jam mode and ignored otherwise.
StepResult step(const SystemState& state, const Action& action, const SimConfig& config,
                std::optional<std::uint64_t> rng_seed = std::nullopt);

struct ScenarioParams {
  int n_workers = 30;
  double max_initial_fill = 0.6;  // initial buffer levels ~ U[0, max] * capacity
  int n_misplaced = 4;            // random relocations applied to the planned staffing
};

/// Random tick-0 state: demand-proportional staffing with n_misplaced random
/// relocations, and random buffer levels.
SystemState make_initial_state(const SimConfig& config, const ScenarioParams& params, std::uint64_t seed);

using Policy = std::function<Action(const SystemState&)>;

enum class InvalidActionMode { kRejectToNoop, kAbort };

/// Runs from initial.tick up to config.episode_length. Tick t uses the
/// sub-seed derive_seed(seed, t) in stochastic mode.
ShiftLog run_episode(const SystemState& initial, const Policy& policy, const SimConfig& config,
                     std::uint64_t seed, InvalidActionMode mode = InvalidActionMode::kRejectToNoop);

/// Seed used by run_episode for tick `tick` (empty in deterministic mode).
std::optional<std::uint64_t> tick_seed(const SimConfig& config, std::uint64_t seed, int tick);

}  // namespace sortsim

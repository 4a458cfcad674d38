#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "sortsim/model.hpp"
#include "sortsim/rng.hpp"
#include "sortsim/sim.hpp"

namespace sortsim {

/// Probability over {stay} and the destination cells for one worker. The stay
/// option is listed as the worker's current position.
struct WorkerDistribution {
  std::string worker_id;
  std::vector<Position> destinations;
  std::vector<double> probs;
  double p_stay = 1.0;
};

struct PolicyDecision {
  Action action;
  std::optional<std::vector<WorkerDistribution>> per_worker_distribution;
  std::string rationale_text;
  std::vector<Event> events;
};

PolicyDecision no_reallocation(const SystemState& state);

struct GreedyParams {
  int max_moves_per_tick = 2;
  // A move is worth making when (horizon - cooldown) * gain - horizon * loss
  // exceeds min_net_gain units.
  double amortization_ticks = 3.0;
  double min_net_gain = 5.0;
};

/// Marginal one-tick flow change for one cell.
struct CellMarginals {
  double gain_plus_one = 0.0;  // flow(n + 1) - flow(n)
  double loss_minus_one = 0.0; // flow(n) - flow(n - 1), 0 when n == 0
};

CellMarginals cell_marginals(const SystemState& state, const SimConfig& config, int line, int stage);

/// Highest-index worker on the cell that is not cooling down, or -1. This is
/// the worker the heuristic policies pick when they move someone off a cell.
int mover_candidate(const SystemState& state, int line, int stage);

PolicyDecision greedy_bottleneck(const SystemState& state, const SimConfig& config,
                                 const GreedyParams& params = {});

/// The single move with the largest estimated net gain, ignoring the
/// threshold; empty when no worker can move anywhere.
Action best_single_move(const SystemState& state, const SimConfig& config, const GreedyParams& params = {});

struct ScriptedManagerConfig {
  double noise = 0.35;  // eta
  int max_moves_per_tick = 2;
  // Per-shift multiplier on eta, drawn uniformly from this list.
  std::vector<double> skill_tiers{0.0, 0.5, 1.0, 2.0};
  GreedyParams greedy{};
};

std::vector<std::string> validate_manager_config(const ScriptedManagerConfig& cfg);
json to_json(const ScriptedManagerConfig& cfg);
ScriptedManagerConfig manager_config_from_json(const json& j);

double draw_skill_tier(const ScriptedManagerConfig& cfg, std::uint64_t shift_seed);

/// Greedy with probability 1 - eta_eff, otherwise (coin flip) a random valid
/// single move or the empty action. Per-tick randomness is derived from
/// (shift_seed, state.tick).
PolicyDecision scripted_manager(const SystemState& state, const SimConfig& config,
                                const ScriptedManagerConfig& cfg, double skill_tier,
                                std::uint64_t shift_seed);

/// A random valid single move (worker not cooling down, destination with a
/// free slot), or empty when none exists.
Action random_valid_move(const SystemState& state, const SimConfig& config, Rng& rng);

/// Cells with a free slot before any move of the current action is applied.
std::vector<Position> open_destinations(const SystemState& state, const SimConfig& config);

}  // namespace sortsim

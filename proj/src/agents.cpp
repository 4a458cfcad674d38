#include "sortsim/agents.hpp"

#include <algorithm>
#include <cstdio>
#include <set>

#include "sortsim/rng.hpp"

namespace sortsim {

PolicyDecision no_reallocation(const SystemState&) { return PolicyDecision{}; }

CellMarginals cell_marginals(const SystemState& state, const SimConfig& config, int line, int stage) {
  const int n = active_workers(state, line, stage);
  const double now = stage_flow(state, config, line, stage, n);
  CellMarginals m;
  m.gain_plus_one = stage_flow(state, config, line, stage, n + 1) - now;
  if (n > 0) m.loss_minus_one = now - stage_flow(state, config, line, stage, n - 1);
  return m;
}

int mover_candidate(const SystemState& state, int line, int stage) {
  for (int w = state.n_workers() - 1; w >= 0; --w)
    if (state.assignment[w] == Position{line, stage} && state.cooldown_remaining[w] <= 0) return w;
  return -1;
}

std::vector<Position> open_destinations(const SystemState& state, const SimConfig& config) {
  std::vector<Position> out;
  for (int l = 0; l < config.n_lines; ++l)
    for (int s = 0; s < kStages; ++s)
      if (state.assigned(l, s) < config.slot_capacity[s]) out.push_back({l, s});
  return out;
}

namespace {

struct Candidate {
  int worker = -1;
  Position from, to;
  double gain = 0.0, loss = 0.0, benefit = 0.0;
};

// Best (source, destination) pair on the working copy. Ties go to the lowest
// (line, stage) source, then the lowest destination.
Candidate best_pair(const SystemState& v, const SimConfig& config, const GreedyParams& params,
                    const std::vector<int>& free_slots, const std::set<int>& moved) {
  const int L = config.n_lines;
  std::vector<CellMarginals> marg(static_cast<std::size_t>(L * kStages));
  for (int c = 0; c < L * kStages; ++c) marg[c] = cell_marginals(v, config, c / kStages, c % kStages);

  Candidate best;
  bool have = false;
  const double H = params.amortization_ticks;
  for (int src = 0; src < L * kStages; ++src) {
    const Position from{src / kStages, src % kStages};
    int worker = -1;
    for (int w = v.n_workers() - 1; w >= 0; --w)
      if (v.assignment[w] == from && v.cooldown_remaining[w] <= 0 && !moved.count(w)) {
        worker = w;
        break;
      }
    if (worker < 0) continue;
    for (int dst = 0; dst < L * kStages; ++dst) {
      if (dst == src || free_slots[dst] <= 0) continue;
      const double gain = marg[dst].gain_plus_one;
      const double loss = marg[src].loss_minus_one;
      const double benefit = (H - config.cooldown) * gain - H * loss;
      if (!have || benefit > best.benefit) {
        best = Candidate{worker, from, Position{dst / kStages, dst % kStages}, gain, loss, benefit};
        have = true;
      }
    }
  }
  return best;
}

std::string format_move(const Candidate& c) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%s L%dS%d->L%dS%d gain %.2f loss %.2f net %.2f",
                worker_id(c.worker).c_str(), c.from.line + 1, c.from.stage + 1, c.to.line + 1,
                c.to.stage + 1, c.gain, c.loss, c.benefit);
  return buf;
}

std::vector<int> free_slot_counts(const SystemState& state, const SimConfig& config) {
  std::vector<int> free(static_cast<std::size_t>(config.n_lines * kStages));
  for (int c = 0; c < config.n_lines * kStages; ++c)
    free[c] = config.slot_capacity[c % kStages] - state.assigned(c / kStages, c % kStages);
  return free;
}

}  // namespace

PolicyDecision greedy_bottleneck(const SystemState& state, const SimConfig& config, const GreedyParams& params) {
  PolicyDecision d;
  SystemState v = state;
  // Destinations are limited to slots free before the action, so every move
  // also has nonzero likelihood under the factorized policy.
  std::vector<int> free = free_slot_counts(state, config);
  std::set<int> moved;
  for (int k = 0; k < params.max_moves_per_tick; ++k) {
    const Candidate c = best_pair(v, config, params, free, moved);
    if (c.worker < 0 || !(c.benefit > params.min_net_gain)) break;
    d.action.moves.push_back(Move{worker_id(c.worker), c.to.line, c.to.stage});
    if (!d.rationale_text.empty()) d.rationale_text += "; ";
    d.rationale_text += format_move(c);
    v.assignment[c.worker] = c.to;  // counted as productive for later estimates
    moved.insert(c.worker);
    --free[c.to.line * kStages + c.to.stage];
  }
  d.action = d.action.canonical();
  return d;
}

Action best_single_move(const SystemState& state, const SimConfig& config, const GreedyParams& params) {
  const Candidate c = best_pair(state, config, params, free_slot_counts(state, config), {});
  if (c.worker < 0) return {};
  return Action{{Move{worker_id(c.worker), c.to.line, c.to.stage}}};
}

std::vector<std::string> validate_manager_config(const ScriptedManagerConfig& cfg) {
  std::vector<std::string> errs;
  if (!(cfg.noise >= 0.0 && cfg.noise <= 1.0)) errs.push_back("noise: must be in [0,1]");
  if (cfg.max_moves_per_tick < 0) errs.push_back("max_moves_per_tick: must be >= 0");
  if (cfg.skill_tiers.empty()) errs.push_back("skill_tiers: must not be empty");
  for (double t : cfg.skill_tiers)
    if (!(t >= 0.0)) errs.push_back("skill_tiers: multipliers must be >= 0");
  return errs;
}

json to_json(const ScriptedManagerConfig& cfg) {
  return {{"noise", cfg.noise},
          {"max_moves_per_tick", cfg.max_moves_per_tick},
          {"skill_tiers", cfg.skill_tiers},
          {"amortization_ticks", cfg.greedy.amortization_ticks},
          {"min_net_gain", cfg.greedy.min_net_gain}};
}

ScriptedManagerConfig manager_config_from_json(const json& j) {
  ScriptedManagerConfig cfg;
  try {
    cfg.noise = j.value("noise", cfg.noise);
    cfg.max_moves_per_tick = j.value("max_moves_per_tick", cfg.max_moves_per_tick);
    if (j.contains("skill_tiers")) cfg.skill_tiers = j.at("skill_tiers").get<std::vector<double>>();
    cfg.greedy.amortization_ticks = j.value("amortization_ticks", cfg.greedy.amortization_ticks);
    cfg.greedy.min_net_gain = j.value("min_net_gain", cfg.greedy.min_net_gain);
  } catch (const json::exception& e) {
    throw DataError(std::string("manager config: ") + e.what());
  }
  cfg.greedy.max_moves_per_tick = cfg.max_moves_per_tick;
  if (auto errs = validate_manager_config(cfg); !errs.empty()) throw UsageError("manager config: " + errs.front());
  return cfg;
}

double draw_skill_tier(const ScriptedManagerConfig& cfg, std::uint64_t shift_seed) {
  Rng rng(derive_seed(shift_seed, 0x5c111ULL));
  return cfg.skill_tiers[rng.below(cfg.skill_tiers.size())];
}

Action random_valid_move(const SystemState& state, const SimConfig& config, Rng& rng) {
  std::vector<int> movable;
  for (int w = 0; w < state.n_workers(); ++w)
    if (state.assignment[w].on_floor() && state.cooldown_remaining[w] <= 0) movable.push_back(w);
  const auto open = open_destinations(state, config);
  if (movable.empty() || open.empty()) return {};
  const int w = movable[rng.below(movable.size())];
  std::vector<Position> dests;
  for (const auto& p : open)
    if (!(p == state.assignment[w])) dests.push_back(p);
  if (dests.empty()) return {};
  const Position to = dests[rng.below(dests.size())];
  return Action{{Move{worker_id(w), to.line, to.stage}}};
}

PolicyDecision scripted_manager(const SystemState& state, const SimConfig& config,
                                const ScriptedManagerConfig& cfg, double skill_tier,
                                std::uint64_t shift_seed) {
  const double eta = std::clamp(cfg.noise * skill_tier, 0.0, 1.0);
  GreedyParams gp = cfg.greedy;
  gp.max_moves_per_tick = cfg.max_moves_per_tick;
  if (eta <= 0.0) return greedy_bottleneck(state, config, gp);

  Rng rng(derive_seed(shift_seed, 0x7a11ULL + static_cast<std::uint64_t>(state.tick)));
  if (!rng.bernoulli(eta)) return greedy_bottleneck(state, config, gp);
  PolicyDecision d;
  if (rng.bernoulli(0.5) && cfg.max_moves_per_tick > 0) {
    d.action = random_valid_move(state, config, rng);
    d.rationale_text = "noise: random move";
  } else {
    d.rationale_text = "noise: hold";
  }
  return d;
}

}  // namespace sortsim

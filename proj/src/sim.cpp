#include "sortsim/sim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>
#include <sstream>

#include "sortsim/rng.hpp"

namespace sortsim {

InvalidActionError::InvalidActionError(std::vector<Violation> v)
    : UsageError("invalid action: " + describe(v)), violations_(std::move(v)) {}

std::string describe(const std::vector<Violation>& violations) {
  std::ostringstream out;
  for (std::size_t i = 0; i < violations.size(); ++i) {
    if (i) out << "; ";
    out << violations[i].kind;
    if (!violations[i].worker_id.empty()) out << " (" << violations[i].worker_id << ")";
    if (!violations[i].message.empty()) out << ": " << violations[i].message;
  }
  return out.str();
}

std::vector<Violation> validate_action(const SystemState& state, const Action& action,
                                       const SimConfig& config) {
  std::vector<Violation> out;
  std::set<int> seen;
  SystemState after = state;
  for (const auto& m : action.moves) {
    auto idx = parse_worker_id(m.worker_id);
    if (!idx || *idx >= state.n_workers()) {
      out.push_back({"unknown_worker", m.worker_id, "no such worker in state"});
      continue;
    }
    if (!seen.insert(*idx).second) {
      out.push_back({"duplicate_worker", m.worker_id, "worker appears more than once"});
      continue;
    }
    const bool off_floor = m.to_line == -1 && m.to_stage == -1;
    const bool in_range =
        m.to_line >= 0 && m.to_line < config.n_lines && m.to_stage >= 0 && m.to_stage < kStages;
    if (!off_floor && !in_range) {
      out.push_back({"invalid_destination", m.worker_id,
                     "line " + std::to_string(m.to_line + 1) + " stage " + std::to_string(m.to_stage + 1)});
      continue;
    }
    const Position to{m.to_line, m.to_stage};
    if (state.assignment[*idx] == to) {
      out.push_back({"self_move", m.worker_id, "destination equals current position"});
      continue;
    }
    after.assignment[*idx] = to;
  }
  for (int l = 0; l < config.n_lines; ++l)
    for (int s = 0; s < kStages; ++s)
      if (after.assigned(l, s) > config.slot_capacity[s] &&
          after.assigned(l, s) > state.assigned(l, s))
        out.push_back({"capacity", "",
                       "line " + std::to_string(l + 1) + " stage " + std::to_string(s + 1) + " exceeds " +
                           std::to_string(config.slot_capacity[s]) + " slots"});
  return out;
}

double throttle(double fill, const SimConfig& config) {
  fill = std::clamp(fill, 0.0, 1.0);
  if (fill <= config.throttle_knee) return 1.0;
  const double frac = (fill - config.throttle_knee) / (1.0 - config.throttle_knee);
  return 1.0 - frac * (1.0 - config.throttle_floor);
}

int active_workers(const SystemState& state, int line, int stage) {
  int n = 0;
  for (std::size_t w = 0; w < state.assignment.size(); ++w)
    if (state.assignment[w] == Position{line, stage} && state.cooldown_remaining[w] <= 0) ++n;
  return n;
}

double jam_multiplier(const SystemState& state, const SimConfig& config, int line, int stage) {
  if (stage != 0) return 1.0;
  if (config.jam_mode == JamMode::kStochastic) return state.jam_remaining[line] > 0 ? 0.0 : 1.0;
  const bool neighbor = (line > 0 && state.line_active(line - 1)) ||
                        (line + 1 < state.n_lines() && state.line_active(line + 1));
  return neighbor ? 1.0 - config.jam_coupling : 1.0;
}

namespace {

double fill_of(double level, double capacity) { return capacity > 0.0 ? level / capacity : 1.0; }

}  // namespace

double stage_flow(const SystemState& state, const SimConfig& config, int line, int stage, int workers) {
  if (workers <= 0) return 0.0;
  const auto& buf = state.buffers[line];
  const auto& cap = config.buffer_capacity[line];
  const double down_fill = fill_of(buf[stage + 1], cap[stage + 1]);
  const double capacity = workers * config.base_rate[stage] * throttle(down_fill, config) *
                          jam_multiplier(state, config, line, stage);
  const double supply = buf[stage];
  const double space = std::max(0.0, cap[stage + 1] - buf[stage + 1]);
  return std::max(0.0, std::min({capacity, supply, space}));
}

double arrivals_at(const SimConfig& config, int line, int tick) {
  const double phase = 2.0 * std::numbers::pi * tick / config.arrival_period + line * std::numbers::pi / 2.0;
  return std::max(0.0, config.arrival_rate[line] * (1.0 + config.arrival_amplitude * std::sin(phase)));
}

StepResult step(const SystemState& state, const Action& action, const SimConfig& config,
                std::optional<std::uint64_t> rng_seed) {
  if (auto v = validate_action(state, action, config); !v.empty()) throw InvalidActionError(std::move(v));
  if (config.jam_mode == JamMode::kStochastic && !rng_seed)
    throw UsageError("step: stochastic jam mode requires an rng seed");

  StepResult r;
  SystemState& s = r.next_state;
  s = state;
  const int L = config.n_lines;

  // (1) moves
  for (const auto& m : action.moves) {
    const int w = *parse_worker_id(m.worker_id);
    s.assignment[w] = Position{m.to_line, m.to_stage};
    s.cooldown_remaining[w] = config.cooldown;
  }

  // (2) jams
  for (int l = 0; l < L; ++l) {
    if (s.jam_remaining[l] > 0 && --s.jam_remaining[l] == 0) r.events.push_back({"jam_clear", l, "", 0.0});
  }
  if (config.jam_mode == JamMode::kStochastic) {
    Rng rng(*rng_seed);
    const double full = config.slot_capacity[0] * config.base_rate[0];
    auto util = [&](int l) {
      return full > 0.0 ? std::clamp(state.last_tick_throughput[l][0] / full, 0.0, 1.0) : 0.0;
    };
    for (int l = 0; l + 1 < L; ++l) {
      if (!s.line_active(l) || !s.line_active(l + 1)) continue;
      const double p = config.jam_hazard_scale * util(l) * util(l + 1);
      const bool jam = rng.bernoulli(p);
      const int victim = l + static_cast<int>(rng.below(2));
      if (jam && s.jam_remaining[victim] == 0 && config.jam_duration > 0) {
        s.jam_remaining[victim] = config.jam_duration;
        r.events.push_back({"jam_onset", victim, "", static_cast<double>(config.jam_duration)});
      }
    }
  }

  // (3) stages, downstream first so nothing passes two stages in one tick
  r.per_stage_flow.assign(static_cast<std::size_t>(L), StageArray{});
  for (int l = 0; l < L; ++l) {
    for (int st = kStages - 1; st >= 0; --st) {
      const double f = stage_flow(s, config, l, st, active_workers(s, l, st));
      s.buffers[l][st] -= f;
      s.buffers[l][st + 1] += f;
      r.per_stage_flow[l][st] = f;
    }
    r.reward += r.per_stage_flow[l][kStages - 1];
  }

  // (4) dispatch, (5) arrivals with backlog
  for (int l = 0; l < L; ++l) {
    const double drained = std::min(config.dispatch_rate, s.buffers[l][kOutbound]);
    s.buffers[l][kOutbound] -= drained;
    s.cumulative_output += drained;

    const double arriving = arrivals_at(config, l, state.tick);
    s.cumulative_arrivals += arriving;
    const double pending = s.external_backlog[l] + arriving;
    const double space = std::max(0.0, config.buffer_capacity[l][kInbound] - s.buffers[l][kInbound]);
    const double enter = std::min(pending, space);
    s.buffers[l][kInbound] += enter;
    const double backlog = pending - enter;
    if (backlog > s.external_backlog[l])
      r.events.push_back({"overflow_to_backlog", l, "", backlog - s.external_backlog[l]});
    s.external_backlog[l] = backlog;
  }

  // (6) bookkeeping
  for (int& c : s.cooldown_remaining)
    if (c > 0) --c;
  s.last_tick_throughput = r.per_stage_flow;
  ++s.tick;
  return r;
}

SystemState make_initial_state(const SimConfig& config, const ScenarioParams& params, std::uint64_t seed) {
  Rng rng(seed);
  SystemState s = empty_state(config, params.n_workers);
  for (int l = 0; l < config.n_lines; ++l)
    for (int b = 0; b < kBuffers - 1; ++b)
      s.buffers[l][b] = rng.uniform() * params.max_initial_fill * config.buffer_capacity[l][b];
  const int cells = config.n_lines * kStages;
  std::vector<int> used(static_cast<std::size_t>(cells), 0);
  // Planned staffing: each worker goes to the open cell with the largest
  // unmet need, need = arrival rate / effective per-worker rate.
  std::vector<double> need(static_cast<std::size_t>(cells), 0.0);
  for (int c = 0; c < cells; ++c) {
    const int l = c / kStages, st = c % kStages;
    const double jam = st == 0 && config.n_lines > 1 ? 1.0 - config.jam_coupling : 1.0;
    const double rate = config.base_rate[st] * jam;
    need[c] = rate > 0.0 ? config.arrival_rate[l] / rate : 0.0;
  }
  int placed = 0;
  for (; placed < params.n_workers; ++placed) {
    int best = -1;
    for (int c = 0; c < cells; ++c) {
      if (used[c] >= config.slot_capacity[c % kStages]) continue;
      if (best < 0 || need[c] - used[c] > need[best] - used[best]) best = c;
    }
    if (best < 0) break;  // surplus workers stay off floor
    ++used[best];
    s.assignment[placed] = Position{best / kStages, best % kStages};
  }
  // Then displace some of them at random.
  const int misplaced = std::min(params.n_misplaced, placed);
  for (int k = 0; k < misplaced; ++k) {
    const int w = static_cast<int>(rng.below(static_cast<std::uint64_t>(placed)));
    std::vector<int> open;
    for (int c = 0; c < cells; ++c)
      if (used[c] < config.slot_capacity[c % kStages] && !(Position{c / kStages, c % kStages} == s.assignment[w]))
        open.push_back(c);
    if (open.empty()) continue;
    const int c = open[rng.below(open.size())];
    --used[s.assignment[w].line * kStages + s.assignment[w].stage];
    ++used[c];
    s.assignment[w] = Position{c / kStages, c % kStages};
  }
  double stocked = 0.0;
  for (const auto& b : s.buffers)
    for (double v : b) stocked += v;
  // Initial stock counts as already arrived so conservation holds from tick 0.
  s.cumulative_arrivals = stocked;
  return s;
}

std::optional<std::uint64_t> tick_seed(const SimConfig& config, std::uint64_t seed, int tick) {
  if (config.jam_mode != JamMode::kStochastic) return std::nullopt;
  return derive_seed(seed, static_cast<std::uint64_t>(tick));
}

ShiftLog run_episode(const SystemState& initial, const Policy& policy, const SimConfig& config,
                     std::uint64_t seed, InvalidActionMode mode) {
  ShiftLog log;
  log.seed = seed;
  log.initial = initial;
  SystemState cur = initial;
  while (cur.tick < config.episode_length) {
    TickRecord rec;
    rec.tick = cur.tick;
    rec.state = cur;
    Action a = policy(cur);
    if (auto v = validate_action(cur, a, config); !v.empty()) {
      if (mode == InvalidActionMode::kAbort) throw InvalidActionError(std::move(v));
      rec.events.push_back({"action_rejected", -1, describe(v), 0.0});
      a = Action{};
    }
    StepResult r = step(cur, a, config, tick_seed(config, seed, cur.tick));
    rec.action = std::move(a);
    rec.reward = r.reward;
    rec.stage_flows = std::move(r.per_stage_flow);
    rec.buffer_levels = r.next_state.buffers;
    rec.events.insert(rec.events.end(), r.events.begin(), r.events.end());
    cur = std::move(r.next_state);
    log.ticks.push_back(std::move(rec));
  }
  log.final_state = std::move(cur);
  return log;
}

}  // namespace sortsim

#pragma once

#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "sortsim/agents.hpp"
#include "sortsim/learn.hpp"
#include "sortsim/model.hpp"
#include "sortsim/rng.hpp"
#include "sortsim/sim.hpp"

namespace testing {

using namespace sortsim;

inline double uniform(Rng& rng, double lo, double hi) { return lo + (hi - lo) * rng.uniform(); }
inline int uniform_int(Rng& rng, int lo, int hi) { return lo + static_cast<int>(rng.below(hi - lo + 1)); }

/// Random valid configuration; zero buffer capacities and both jam modes included.
inline SimConfig random_config(Rng& rng, int max_lines = 4) {
  SimConfig c = SimConfig::defaults(uniform_int(rng, 1, max_lines));
  for (int s = 0; s < kStages; ++s) {
    c.slot_capacity[s] = uniform_int(rng, 1, 5);
    c.base_rate[s] = uniform(rng, 0.5, 15.0);
  }
  for (int l = 0; l < c.n_lines; ++l) {
    for (int b = 0; b < kBuffers; ++b) c.buffer_capacity[l][b] = rng.bernoulli(0.05) ? 0.0 : uniform(rng, 5.0, 200.0);
    c.arrival_rate[l] = uniform(rng, 0.0, 40.0);
  }
  c.arrival_amplitude = uniform(rng, 0.0, 1.0);
  c.arrival_period = uniform_int(rng, 5, 60);
  c.throttle_knee = uniform(rng, 0.0, 0.95);
  c.throttle_floor = uniform(rng, 0.0, 1.0);
  c.jam_coupling = uniform(rng, 0.0, 1.0);
  c.jam_mode = rng.bernoulli(0.5) ? JamMode::kStochastic : JamMode::kDeterministic;
  c.jam_duration = uniform_int(rng, 1, 4);
  c.jam_hazard_scale = uniform(rng, 0.0, 1.0);
  c.dispatch_rate = uniform(rng, 0.0, 60.0);
  c.cooldown = uniform_int(rng, 0, 3);
  c.episode_length = uniform_int(rng, 20, 80);
  return c;
}

/// Valid action built by rejection: each accepted move keeps the action valid.
inline Action random_valid_action(const SystemState& state, const SimConfig& config, Rng& rng, int max_moves = 3) {
  Action a;
  if (state.n_workers() == 0) return a;
  const int tries = uniform_int(rng, 0, 2 * max_moves);
  for (int k = 0; k < tries && static_cast<int>(a.moves.size()) < max_moves; ++k) {
    const int w = static_cast<int>(rng.below(static_cast<std::uint64_t>(state.n_workers())));
    Move m{worker_id(w), -1, -1};
    if (!rng.bernoulli(0.1)) {
      m.to_line = uniform_int(rng, 0, config.n_lines - 1);
      m.to_stage = uniform_int(rng, 0, kStages - 1);
    }
    Action trial = a;
    trial.moves.push_back(m);
    if (validate_action(state, trial, config).empty()) a = std::move(trial);
  }
  return a;
}

inline ScenarioParams random_scenario(Rng& rng, const SimConfig& config) {
  ScenarioParams p;
  const int slots = config.n_lines * (config.slot_capacity[0] + config.slot_capacity[1] + config.slot_capacity[2]);
  p.n_workers = uniform_int(rng, 0, slots + 2);
  p.max_initial_fill = uniform(rng, 0.0, 1.0);
  p.n_misplaced = uniform_int(rng, 0, 5);
  return p;
}

/// State reached from a random initial state after a few random valid steps.
inline SystemState random_state(const SimConfig& config, Rng& rng, int max_ticks = 10) {
  SystemState s = make_initial_state(config, random_scenario(rng, config), rng.next());
  const int n = uniform_int(rng, 0, std::min(max_ticks, config.episode_length - 1));
  for (int k = 0; k < n; ++k)
    s = step(s, random_valid_action(s, config, rng), config, rng.next()).next_state;
  return s;
}

// ---------------------------------------------------------------------------
// Independent oracles

/// Arrivals during a tick, written from the published arrival profile.
inline double oracle_arrivals(const SimConfig& c, int line, int tick) {
  const double phase = 2.0 * std::numbers::pi * tick / c.arrival_period + line * std::numbers::pi / 2.0;
  const double v = c.arrival_rate[line] * (1.0 + c.arrival_amplitude * std::sin(phase));
  return v > 0.0 ? v : 0.0;
}

inline double stock_in_system(const SystemState& s) {
  double total = s.cumulative_output;
  for (double b : s.external_backlog) total += b;
  for (const auto& line : s.buffers)
    for (double v : line) total += v;
  return total;
}

/// Per-destination softmax computed with explicit loops over raw parameters.
inline std::vector<double> oracle_probs(const FactorizedPolicy& p, const PositionFeatures& f, int slot) {
  const auto& wk = f.workers[slot];
  const int dk = static_cast<int>(p.w_query.cols());
  std::vector<double> q(dk, 0.0);
  for (int c = 0; c < dk; ++c)
    for (int i = 0; i < kFeatureDim; ++i) q[c] += p.w_query(i, c) * wk.query(i);
  std::vector<double> z;
  for (int d : wk.destinations) {
    const FeatureVec key = f.key(slot, d);
    double dot = 0.0;
    for (int c = 0; c < dk; ++c) {
      double kc = 0.0;
      for (int i = 0; i < kFeatureDim; ++i) kc += p.w_key(i, c) * key(i);
      dot += q[c] * kc;
    }
    z.push_back(dot / p.temperature);
  }
  double mx = z[0];
  for (double v : z) mx = std::max(mx, v);
  double sum = 0.0;
  for (double& v : z) sum += (v = std::exp(v - mx));
  for (double& v : z) v /= sum;
  return z;
}

/// -(1/N) sum_i w_i log pi(a_i | s_i) from the oracle softmax.
inline double oracle_loss(const FactorizedPolicy& p, const std::vector<Sample>& batch, const std::vector<double>& w) {
  double total = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    double lp = 0.0;
    for (std::size_t k = 0; k < batch[i].features.workers.size(); ++k)
      lp += std::log(oracle_probs(p, batch[i].features, static_cast<int>(k))[batch[i].chosen[k]]);
    total += w[i] * lp;
  }
  return -total / static_cast<double>(batch.size());
}

/// Scratch directory removed on destruction.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() /
           ("sortsim-" + tag + "-" + std::to_string(std::random_device{}()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  std::string str(const std::string& name = "") const { return (name.empty() ? path : path / name).string(); }
};

}  // namespace testing

#include "sortsim/learn.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "sortsim/errors.hpp"

namespace sortsim {

namespace {

double safe_div(double a, double b) { return b > 0.0 ? a / b : 0.0; }

}  // namespace

FeatureVec PositionFeatures::key(int w, int d) const {
  FeatureVec k = cell[d];
  const int own = workers[w].cell;
  k(13) = d == own ? 1.0 : 0.0;
  k(14) = d / kStages == own / kStages ? 1.0 : 0.0;
  return k;
}

PositionFeatures extract_features(const SystemState& state, const SimConfig& config) {
  PositionFeatures f;
  const int L = config.n_lines;
  f.n_lines = L;
  f.cell.resize(static_cast<std::size_t>(L * kStages));
  const double tick_frac = safe_div(state.tick, config.episode_length);

  std::vector<int> assigned(f.cell.size(), 0), cooling(f.cell.size(), 0);
  for (int w = 0; w < state.n_workers(); ++w) {
    const auto& p = state.assignment[w];
    if (!p.on_floor()) continue;
    const int c = p.line * kStages + p.stage;
    ++assigned[c];
    if (state.cooldown_remaining[w] > 0) ++cooling[c];
  }
  std::vector<bool> line_active(static_cast<std::size_t>(L), false);
  f.free_slots.resize(f.cell.size());
  for (int c = 0; c < L * kStages; ++c) {
    if (assigned[c] > 0) line_active[c / kStages] = true;
    f.free_slots[c] = std::max(0, config.slot_capacity[c % kStages] - assigned[c]);
  }

  const int cells = L * kStages;
  const double scale = *std::max_element(config.base_rate.begin(), config.base_rate.end());
  std::vector<CellMarginals> marg(static_cast<std::size_t>(cells));
  std::vector<int> candidate(static_cast<std::size_t>(cells), -1);
  for (int c = 0; c < cells; ++c) {
    marg[c] = cell_marginals(state, config, c / kStages, c % kStages);
    candidate[c] = mover_candidate(state, c / kStages, c % kStages);
  }
  // Heuristic net gain of moving the candidate of cell s to cell d, as scored
  // by greedy_bottleneck with default parameters.
  const GreedyParams gp;
  constexpr double kNone = -3.0;
  std::vector<double> best_out(static_cast<std::size_t>(cells), kNone), best_in(static_cast<std::size_t>(cells), kNone);
  double best_any = kNone;
  for (int s = 0; s < cells; ++s) {
    if (candidate[s] < 0) continue;
    for (int d = 0; d < cells; ++d) {
      if (d == s || f.free_slots[d] <= 0) continue;
      const double b = std::clamp(
          ((gp.amortization_ticks - config.cooldown) * marg[d].gain_plus_one - gp.amortization_ticks * marg[s].loss_minus_one) /
              scale,
          kNone, -kNone);
      best_out[s] = std::max(best_out[s], b);
      best_in[d] = std::max(best_in[d], b);
      best_any = std::max(best_any, b);
    }
  }

  for (int c = 0; c < cells; ++c) {
    const int l = c / kStages, s = c % kStages;
    const auto& buf = state.buffers[l];
    const auto& cap = config.buffer_capacity[l];
    const double rate = config.base_rate[s];
    FeatureVec v = FeatureVec::Zero();
    v(0) = 1.0;
    v(1 + s) = 1.0;
    v(4) = line_active[l] ? 1.0 : 0.0;
    v(5) = std::clamp(safe_div(buf[s], cap[s]), 0.0, 1.0);
    v(6) = std::clamp(safe_div(buf[s + 1], cap[s + 1]), 0.0, 1.0);
    v(7) = safe_div(assigned[c], config.slot_capacity[s]);
    v(8) = safe_div(state.last_tick_throughput[l][s], config.slot_capacity[s] * rate);
    v(9) = safe_div(marg[c].gain_plus_one, scale);
    v(10) = safe_div(marg[c].loss_minus_one, scale);
    v(11) = tick_frac;
    v(12) = safe_div(cooling[c], assigned[c]);
    v(15) = best_in[c] - best_any;
    f.cell[c] = v;
  }

  for (int w = 0; w < state.n_workers(); ++w) {
    const auto& p = state.assignment[w];
    if (!p.on_floor()) continue;
    PositionFeatures::Worker wk;
    wk.worker = w;
    wk.cell = p.line * kStages + p.stage;
    wk.query = f.cell[wk.cell];
    wk.query(12) = state.cooldown_remaining[w] > 0 ? 1.0 : 0.0;
    wk.query(13) = mover_candidate(state, p.line, p.stage) == w ? 1.0 : 0.0;
    wk.query(14) = 1.0;
    wk.query(15) = best_out[wk.cell];
    wk.destinations.push_back(wk.cell);
    for (int d = 0; d < L * kStages; ++d)
      if (d != wk.cell && f.free_slots[d] > 0) wk.destinations.push_back(d);
    f.workers.push_back(std::move(wk));
  }
  return f;
}

// ---------------------------------------------------------------------------

FactorizedPolicy FactorizedPolicy::zeros(int key_dim) {
  FactorizedPolicy p;
  p.w_query = Eigen::MatrixXd::Zero(kFeatureDim, key_dim);
  p.w_key = Eigen::MatrixXd::Zero(kFeatureDim, key_dim);
  return p;
}

FactorizedPolicy FactorizedPolicy::random(std::uint64_t seed, double scale, int key_dim) {
  FactorizedPolicy p = zeros(key_dim);
  Rng rng(seed);
  for (Eigen::Index i = 0; i < p.w_query.size(); ++i) p.w_query.data()[i] = scale * rng.normal();
  for (Eigen::Index i = 0; i < p.w_key.size(); ++i) p.w_key.data()[i] = scale * rng.normal();
  return p;
}

Eigen::VectorXd FactorizedPolicy::flat() const {
  Eigen::VectorXd theta(static_cast<Eigen::Index>(n_params()));
  theta << Eigen::Map<const Eigen::VectorXd>(w_query.data(), w_query.size()),
      Eigen::Map<const Eigen::VectorXd>(w_key.data(), w_key.size());
  return theta;
}

void FactorizedPolicy::set_flat(const Eigen::VectorXd& theta) {
  const Eigen::Index nq = w_query.size();
  Eigen::Map<Eigen::VectorXd>(w_query.data(), nq) = theta.head(nq);
  Eigen::Map<Eigen::VectorXd>(w_key.data(), w_key.size()) = theta.tail(w_key.size());
}

namespace {

// Logits for one worker: z_j = (W_q^T x) . (W_k^T y_j) / tau.
Eigen::VectorXd worker_logits(const FactorizedPolicy& policy, const PositionFeatures& f, int slot) {
  const auto& wk = f.workers[slot];
  const Eigen::VectorXd q = policy.w_query.transpose() * wk.query;
  Eigen::VectorXd z(static_cast<Eigen::Index>(wk.destinations.size()));
  for (std::size_t j = 0; j < wk.destinations.size(); ++j)
    z(static_cast<Eigen::Index>(j)) = q.dot(policy.w_key.transpose() * f.key(slot, wk.destinations[j]));
  return z / policy.temperature;
}

Eigen::VectorXd softmax(const Eigen::VectorXd& z) {
  const double mx = z.maxCoeff();
  Eigen::VectorXd e = (z.array() - mx).exp();
  return e / e.sum();
}

double log_softmax_at(const Eigen::VectorXd& z, Eigen::Index i) {
  const double mx = z.maxCoeff();
  return z(i) - mx - std::log((z.array() - mx).exp().sum());
}

}  // namespace

Eigen::VectorXd destination_probs(const FactorizedPolicy& policy, const PositionFeatures& f, int worker_slot) {
  return softmax(worker_logits(policy, f, worker_slot));
}

std::vector<int> chosen_destinations(const PositionFeatures& f, const Action& action) {
  std::vector<int> chosen(f.workers.size(), 0);
  for (const auto& m : action.moves) {
    const auto idx = parse_worker_id(m.worker_id);
    auto it = std::find_if(f.workers.begin(), f.workers.end(),
                           [&](const PositionFeatures::Worker& w) { return idx && w.worker == *idx; });
    if (it == f.workers.end())
      throw DataError("undefined likelihood: " + m.worker_id + " is not an occupied position");
    if (m.to_line < 0 || m.to_line >= f.n_lines || m.to_stage < 0 || m.to_stage >= kStages)
      throw DataError("undefined likelihood: " + m.worker_id + " leaves the floor");
    const int target = m.to_line * kStages + m.to_stage;
    auto dit = std::find(it->destinations.begin(), it->destinations.end(), target);
    if (dit == it->destinations.end() || dit == it->destinations.begin())
      throw DataError("undefined likelihood: destination of " + m.worker_id + " is masked");
    chosen[static_cast<std::size_t>(it - f.workers.begin())] =
        static_cast<int>(dit - it->destinations.begin());
  }
  return chosen;
}

double action_log_prob(const FactorizedPolicy& policy, const PositionFeatures& f, const Action& action) {
  const auto chosen = chosen_destinations(f, action);
  double lp = 0.0;
  for (std::size_t i = 0; i < f.workers.size(); ++i)
    lp += log_softmax_at(worker_logits(policy, f, static_cast<int>(i)), chosen[i]);
  return lp;
}

PolicyDecision decode_action(const FactorizedPolicy& policy, const PositionFeatures& f, DecodeMode mode,
                             Rng* rng) {
  if (mode == DecodeMode::kSample && rng == nullptr) throw UsageError("decode_action: sampling needs an rng");
  struct Mover {
    int slot;
    double confidence;
    int target;
  };
  PolicyDecision d;
  std::vector<WorkerDistribution> dists;
  std::vector<Mover> movers;
  std::vector<int> free = f.free_slots;
  for (std::size_t i = 0; i < f.workers.size(); ++i) {
    const auto& wk = f.workers[i];
    const Eigen::VectorXd p = destination_probs(policy, f, static_cast<int>(i));
    WorkerDistribution wd;
    wd.worker_id = worker_id(wk.worker);
    for (std::size_t j = 0; j < wk.destinations.size(); ++j) {
      const int c = wk.destinations[j];
      wd.destinations.push_back(Position{c / kStages, c % kStages});
    }
    wd.probs.assign(p.data(), p.data() + p.size());
    wd.p_stay = p(0);
    dists.push_back(std::move(wd));

    int target = 0;
    if (mode == DecodeMode::kGreedy) {
      if (p(0) < policy.stay_threshold && p.size() > 1) {
        Eigen::Index best = 1;
        for (Eigen::Index j = 2; j < p.size(); ++j)
          if (p(j) > p(best)) best = j;
        target = static_cast<int>(best);
      }
    } else {
      const double u = rng->uniform();
      double acc = 0.0;
      target = static_cast<int>(p.size()) - 1;
      for (Eigen::Index j = 0; j < p.size(); ++j) {
        acc += p(j);
        if (u < acc) {
          target = static_cast<int>(j);
          break;
        }
      }
    }
    if (target != 0) movers.push_back({static_cast<int>(i), 1.0 - p(0), wk.destinations[target]});
  }
  std::stable_sort(movers.begin(), movers.end(), [&](const Mover& a, const Mover& b) {
    if (a.confidence != b.confidence) return a.confidence > b.confidence;
    return f.workers[a.slot].worker < f.workers[b.slot].worker;
  });
  for (const auto& m : movers) {
    if (free[m.target] <= 0) continue;
    --free[m.target];
    d.action.moves.push_back(Move{worker_id(f.workers[m.slot].worker), m.target / kStages, m.target % kStages});
  }
  d.action = d.action.canonical();
  d.per_worker_distribution = std::move(dists);
  return d;
}

PolicyDecision policy_decide(const FactorizedPolicy& policy, const SystemState& state, const SimConfig& config) {
  return decode_action(policy, extract_features(state, config));
}

// ---------------------------------------------------------------------------

ValueFeatureVec value_features(const SystemState& state, const SimConfig& config) {
  const int L = config.n_lines;
  const double t = safe_div(state.tick, config.episode_length);
  const double remaining = std::max(0.0, 1.0 - t);
  Eigen::Matrix<double, kValueFeatureDim / 2, 1> raw;
  raw.setZero();
  raw(0) = t;
  for (int b = 0; b < kBuffers; ++b) {
    double fill = 0.0;
    for (int l = 0; l < L; ++l) fill += safe_div(state.buffers[l][b], config.buffer_capacity[l][b]);
    raw(1 + b) = fill / L;
  }
  for (int s = 0; s < kStages; ++s) {
    int n = 0;
    for (int l = 0; l < L; ++l) n += state.assigned(l, s);
    raw(5 + s) = safe_div(n, config.slot_capacity[s] * L);
  }
  double tput = 0.0, backlog = 0.0, in_cap = 0.0;
  int active = 0;
  for (int l = 0; l < L; ++l) {
    tput += state.last_tick_throughput[l][kStages - 1];
    backlog += state.external_backlog[l];
    in_cap += config.buffer_capacity[l][kInbound];
    if (state.line_active(l)) ++active;
  }
  raw(8) = safe_div(tput, L * config.slot_capacity[kStages - 1] * config.base_rate[kStages - 1]);
  raw(9) = std::min(10.0, safe_div(backlog, in_cap));
  raw(10) = safe_div(active, L);
  ValueFeatureVec phi;
  phi << raw, remaining * raw;
  return phi;
}

ValueModel fit_value(std::span<const ValueFeatureVec> phi, std::span<const double> targets, double ridge) {
  if (phi.size() != targets.size()) throw UsageError("fit_value: size mismatch");
  ValueModel v;
  if (phi.empty()) return v;
  const auto n = static_cast<Eigen::Index>(phi.size());
  constexpr Eigen::Index D = kValueFeatureDim;
  Eigen::MatrixXd X(n, D + 1);
  Eigen::VectorXd y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    X.row(i).head(D) = phi[static_cast<std::size_t>(i)].transpose();
    X(i, D) = 1.0;
    y(i) = targets[static_cast<std::size_t>(i)];
  }
  Eigen::MatrixXd A = X.transpose() * X;
  A.diagonal().head(D).array() += ridge * static_cast<double>(n);
  const Eigen::VectorXd sol = A.ldlt().solve(X.transpose() * y);
  v.w = sol.head(D);
  v.b = sol(D);
  if (!v.w.allFinite() || !std::isfinite(v.b)) throw NumericError("fit_value: least squares produced non-finite weights");
  return v;
}

}  // namespace sortsim

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>
#include <thread>

#include "sortsim/errors.hpp"
#include "sortsim/learn.hpp"

namespace sortsim {

std::string method_name(TrainMethod m) {
  switch (m) {
    case TrainMethod::kBC:
      return "bc";
    case TrainMethod::kBCFT:
      return "bcft";
    case TrainMethod::kAC:
      return "ac";
  }
  return "?";
}

std::optional<TrainMethod> parse_method(const std::string& name) {
  if (name == "bc") return TrainMethod::kBC;
  if (name == "bcft") return TrainMethod::kBCFT;
  if (name == "ac") return TrainMethod::kAC;
  return std::nullopt;
}

std::vector<std::string> validate_train_config(const TrainConfig& c) {
  std::vector<std::string> errs;
  if (!(c.alpha >= 0.0)) errs.push_back("alpha: must be >= 0");
  if (!(c.gamma > 0.0 && c.gamma <= 1.0)) errs.push_back("gamma: must be in (0,1]");
  if (!(c.learning_rate > 0.0)) errs.push_back("learning_rate: must be > 0");
  if (!(c.momentum >= 0.0 && c.momentum < 1.0)) errs.push_back("momentum: must be in [0,1)");
  if (c.batch_size < 1) errs.push_back("batch_size: must be >= 1");
  if (c.epochs < 0 || c.finetune_epochs < 0) errs.push_back("epochs: must be >= 0");
  if (!(c.bcft_top_fraction > 0.0 && c.bcft_top_fraction <= 1.0)) errs.push_back("bcft_top_fraction: must be in (0,1]");
  if (c.patience < 0) errs.push_back("patience: must be >= 0");
  if (!(c.heldout_fraction >= 0.0 && c.heldout_fraction < 1.0)) errs.push_back("heldout_fraction: must be in [0,1)");
  if (!(c.weight_decay >= 0.0)) errs.push_back("weight_decay: must be >= 0");
  if (c.key_dim < 1) errs.push_back("key_dim: must be >= 1");
  if (c.threads < 1) errs.push_back("threads: must be >= 1");
  return errs;
}

json to_json(const TrainConfig& c) {
  return {{"alpha", c.alpha},
          {"gamma", c.gamma},
          {"learning_rate", c.learning_rate},
          {"momentum", c.momentum},
          {"optimizer", c.adam ? "adam" : "sgd"},
          {"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"finetune_epochs", c.finetune_epochs},
          {"bcft_top_fraction", c.bcft_top_fraction},
          {"standardize_advantages", c.standardize_advantages},
          {"patience", c.patience},
          {"early_stopping", c.early_stopping == TrainConfig::Stopping::kReturn ? "return" : "loss"},
          {"heldout_fraction", c.heldout_fraction},
          {"max_grad_norm", c.max_grad_norm},
          {"weight_decay", c.weight_decay},
          {"key_dim", c.key_dim},
          {"init_scale", c.init_scale},
          {"seed", c.seed}};
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  try {
    c.alpha = j.value("alpha", c.alpha);
    c.gamma = j.value("gamma", c.gamma);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.momentum = j.value("momentum", c.momentum);
    const std::string opt = j.value("optimizer", std::string(c.adam ? "adam" : "sgd"));
    if (opt != "adam" && opt != "sgd") throw UsageError("train config: optimizer must be adam or sgd");
    c.adam = opt == "adam";
    c.batch_size = j.value("batch_size", c.batch_size);
    c.epochs = j.value("epochs", c.epochs);
    c.finetune_epochs = j.value("finetune_epochs", c.finetune_epochs);
    c.bcft_top_fraction = j.value("bcft_top_fraction", c.bcft_top_fraction);
    c.standardize_advantages = j.value("standardize_advantages", c.standardize_advantages);
    c.patience = j.value("patience", c.patience);
    const std::string stop = j.value("early_stopping", std::string("return"));
    if (stop != "loss" && stop != "return") throw UsageError("train config: early_stopping must be loss or return");
    c.early_stopping = stop == "return" ? TrainConfig::Stopping::kReturn : TrainConfig::Stopping::kLoss;
    c.heldout_fraction = j.value("heldout_fraction", c.heldout_fraction);
    c.max_grad_norm = j.value("max_grad_norm", c.max_grad_norm);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.key_dim = j.value("key_dim", c.key_dim);
    c.init_scale = j.value("init_scale", c.init_scale);
    c.seed = j.value("seed", c.seed);
  } catch (const json::exception& e) {
    throw DataError(std::string("train config: ") + e.what());
  }
  if (auto errs = validate_train_config(c); !errs.empty()) throw UsageError("train config: " + errs.front());
  return c;
}

// ---------------------------------------------------------------------------
// Returns

TrajectoryReturns compute_returns(const ShiftLog& log, const ValueModel& value, const SimConfig& sim,
                                  const TrainConfig& config) {
  TrajectoryReturns r;
  const std::size_t n = log.ticks.size();
  r.rewards.resize(n);
  r.returns.resize(n);
  r.values.resize(n);
  r.advantages.resize(n);
  double g = 0.0;
  for (std::size_t k = n; k-- > 0;) {
    r.rewards[k] = log.ticks[k].reward;
    g = r.rewards[k] + config.gamma * g;
    r.returns[k] = g;
  }
  for (std::size_t k = 0; k < n; ++k) {
    r.values[k] = value.predict(value_features(log.ticks[k].state, sim));
    r.advantages[k] = r.returns[k] - r.values[k];
  }
  return r;
}

void standardize(std::span<double> values) {
  if (values.empty()) return;
  const double n = static_cast<double>(values.size());
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  double var = 0.0;
  for (double v : values) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / n);
  for (double& v : values) v = sd > 1e-12 ? (v - mean) / sd : 0.0;
}

std::vector<TrajectoryReturns> compute_returns(std::span<const ShiftLog> logs, const ValueModel& value,
                                               const SimConfig& sim, const TrainConfig& config) {
  std::vector<TrajectoryReturns> out;
  out.reserve(logs.size());
  std::vector<double> all;
  for (const auto& log : logs) {
    out.push_back(compute_returns(log, value, sim, config));
    all.insert(all.end(), out.back().advantages.begin(), out.back().advantages.end());
  }
  if (config.standardize_advantages) {
    standardize(all);
    std::size_t k = 0;
    for (auto& r : out)
      for (double& a : r.advantages) a = all[k++];
  }
  return out;
}

std::vector<Sample> build_samples(std::span<const ShiftLog> logs, const SimConfig& sim, const TrainConfig& config,
                                  std::size_t* skipped) {
  std::vector<Sample> out;
  std::size_t skip = 0;
  const ValueModel zero;
  for (std::size_t i = 0; i < logs.size(); ++i) {
    const TrajectoryReturns r = compute_returns(logs[i], zero, sim, config);
    for (std::size_t k = 0; k < logs[i].ticks.size(); ++k) {
      const auto& t = logs[i].ticks[k];
      Sample s;
      s.features = extract_features(t.state, sim);
      try {
        s.chosen = chosen_destinations(s.features, t.action);
      } catch (const DataError&) {
        ++skip;
        continue;
      }
      s.ret = r.returns[k];
      s.advantage = r.returns[k];
      s.value_phi = value_features(t.state, sim);
      s.shift = static_cast<int>(i);
      out.push_back(std::move(s));
    }
  }
  if (skipped) *skipped = skip;
  return out;
}

// ---------------------------------------------------------------------------
// Loss and gradient

namespace {

struct Accum {
  double loss = 0.0;
  Eigen::MatrixXd g_query, g_key;
};

void accumulate(const FactorizedPolicy& policy, const Sample& s, double scale, Accum& acc, bool want_grad) {
  const auto& f = s.features;
  const double tau = policy.temperature;
  const Eigen::MatrixXd kbase = policy.w_key.transpose() * [&] {
    Eigen::MatrixXd cells(kFeatureDim, f.n_cells());
    for (int c = 0; c < f.n_cells(); ++c) cells.col(c) = f.cell[c];
    return cells;
  }();
  const Eigen::VectorXd k_self = policy.w_key.row(13).transpose();
  const Eigen::VectorXd k_line = policy.w_key.row(14).transpose();
  const int dk = policy.key_dim();

  for (std::size_t i = 0; i < f.workers.size(); ++i) {
    const auto& wk = f.workers[i];
    const auto n = static_cast<Eigen::Index>(wk.destinations.size());
    const Eigen::VectorXd q = policy.w_query.transpose() * wk.query;
    Eigen::MatrixXd keys(dk, n);
    for (Eigen::Index j = 0; j < n; ++j) {
      const int d = wk.destinations[static_cast<std::size_t>(j)];
      keys.col(j) = kbase.col(d);
      if (d == wk.cell) keys.col(j) += k_self;
      if (d / kStages == wk.cell / kStages) keys.col(j) += k_line;
    }
    const Eigen::VectorXd z = keys.transpose() * q / tau;
    const double mx = z.maxCoeff();
    const Eigen::VectorXd e = (z.array() - mx).exp();
    const double sum = e.sum();
    const int a = s.chosen[i];
    acc.loss -= scale * (z(a) - mx - std::log(sum));
    if (!want_grad) continue;

    Eigen::VectorXd g = scale * e / sum;  // dL/dz
    g(a) -= scale;
    const Eigen::VectorXd gk = keys * g;  // sum_j g_j k_j
    acc.g_query.noalias() += wk.query * gk.transpose() / tau;
    FeatureVec gy = FeatureVec::Zero();
    for (Eigen::Index j = 0; j < n; ++j) {
      const int d = wk.destinations[static_cast<std::size_t>(j)];
      gy += g(j) * f.cell[d];
      if (d == wk.cell) gy(13) += g(j);
      if (d / kStages == wk.cell / kStages) gy(14) += g(j);
    }
    acc.g_key.noalias() += gy * q.transpose() / tau;
  }
}

}  // namespace

double weighted_nll(const FactorizedPolicy& policy, std::span<const Sample* const> batch,
                    std::span<const double> weights, Eigen::VectorXd* grad, int threads) {
  if (weights.size() != batch.size()) throw UsageError("weighted_nll: weights/batch size mismatch");
  if (batch.empty()) {
    if (grad) *grad = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(policy.n_params()));
    return 0.0;
  }
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  const int shards = std::max(1, std::min<int>(threads, static_cast<int>(batch.size())));
  std::vector<Accum> acc(static_cast<std::size_t>(shards));
  for (auto& a : acc) {
    a.g_query = Eigen::MatrixXd::Zero(policy.w_query.rows(), policy.w_query.cols());
    a.g_key = Eigen::MatrixXd::Zero(policy.w_key.rows(), policy.w_key.cols());
  }
  auto work = [&](int shard) {
    for (std::size_t i = static_cast<std::size_t>(shard); i < batch.size(); i += static_cast<std::size_t>(shards))
      accumulate(policy, *batch[i], weights[i] * inv_n, acc[static_cast<std::size_t>(shard)], grad != nullptr);
  };
  if (shards == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < shards; ++t) pool.emplace_back(work, t);
    for (auto& t : pool) t.join();
  }
  // Shards are reduced in index order, so results depend only on `threads`.
  for (int t = 1; t < shards; ++t) {
    acc[0].loss += acc[t].loss;
    acc[0].g_query += acc[t].g_query;
    acc[0].g_key += acc[t].g_key;
  }
  if (grad) {
    grad->resize(static_cast<Eigen::Index>(policy.n_params()));
    *grad << Eigen::Map<const Eigen::VectorXd>(acc[0].g_query.data(), acc[0].g_query.size()),
        Eigen::Map<const Eigen::VectorXd>(acc[0].g_key.data(), acc[0].g_key.size());
  }
  return acc[0].loss;
}

double mean_log_likelihood(const FactorizedPolicy& policy, std::span<const Sample> samples) {
  if (samples.empty()) return 0.0;
  std::vector<const Sample*> ptrs;
  for (const auto& s : samples) ptrs.push_back(&s);
  const std::vector<double> ones(ptrs.size(), 1.0);
  return -weighted_nll(policy, ptrs, ones, nullptr);
}

// ---------------------------------------------------------------------------
// Optimisation

namespace {

using WeightFn = std::function<std::vector<double>(std::span<const Sample* const>)>;
using ObjectiveFn = std::function<double(const FactorizedPolicy&)>;  // lower is better

struct Split {
  std::vector<Sample> train, heldout;
  std::vector<std::size_t> train_shifts, heldout_shifts;
};

Split split_corpus(std::span<const ShiftLog> corpus, const SimConfig& sim, const TrainConfig& config,
                   std::size_t* skipped) {
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(config.seed, 0x5b117ULL));
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  std::size_t n_held = corpus.size() >= 5
                           ? static_cast<std::size_t>(std::llround(config.heldout_fraction * corpus.size()))
                           : 0;
  Split s;
  s.heldout_shifts.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_held));
  s.train_shifts.assign(order.begin() + static_cast<std::ptrdiff_t>(n_held), order.end());
  std::sort(s.heldout_shifts.begin(), s.heldout_shifts.end());
  std::sort(s.train_shifts.begin(), s.train_shifts.end());
  auto collect = [&](const std::vector<std::size_t>& idx, std::vector<Sample>& out) {
    std::vector<ShiftLog> logs;
    for (auto i : idx) logs.push_back(corpus[i]);
    std::size_t sk = 0;
    out = build_samples(logs, sim, config, &sk);
    for (auto& smp : out) smp.shift = static_cast<int>(idx[static_cast<std::size_t>(smp.shift)]);
    if (skipped) *skipped += sk;
  };
  collect(s.train_shifts, s.train);
  collect(s.heldout_shifts, s.heldout);
  return s;
}

Split subset(const Split& all, std::span<const ShiftLog> corpus, double q) {
  auto top = [&](const std::vector<std::size_t>& shifts) {
    std::vector<ShiftLog> logs;
    for (auto i : shifts) logs.push_back(corpus[i]);
    std::vector<std::size_t> keep;
    if (logs.empty()) return keep;
    for (auto k : top_fraction(logs, q)) keep.push_back(shifts[k]);
    std::sort(keep.begin(), keep.end());
    return keep;
  };
  Split s;
  s.train_shifts = top(all.train_shifts);
  s.heldout_shifts = all.heldout_shifts.empty() ? std::vector<std::size_t>{} : top(all.heldout_shifts);
  auto filter = [](const std::vector<Sample>& in, const std::vector<std::size_t>& keep) {
    std::vector<Sample> out;
    for (const auto& smp : in)
      if (std::binary_search(keep.begin(), keep.end(), static_cast<std::size_t>(smp.shift))) out.push_back(smp);
    return out;
  };
  s.train = filter(all.train, s.train_shifts);
  s.heldout = filter(all.heldout, s.heldout_shifts);
  return s;
}

struct OptimizeOutcome {
  int best_epoch = 0;
  int stopped_epoch = 0;
  bool early_stopped = false;
};

OptimizeOutcome optimize(FactorizedPolicy& policy, const std::vector<Sample>& train_set,
                         const std::vector<Sample>& heldout_set, const WeightFn& weights_for,
                         const ObjectiveFn& heldout_objective, int epochs, double lr, const TrainConfig& config,
                         std::uint64_t shuffle_seed, int epoch_offset, std::vector<EpochMetrics>& metrics,
                         double mean_advantage) {
  OptimizeOutcome out;
  if (train_set.empty()) throw DataError("training: no usable transitions");
  Eigen::VectorXd theta = policy.flat();
  Eigen::VectorXd velocity = Eigen::VectorXd::Zero(theta.size());
  Eigen::VectorXd second = Eigen::VectorXd::Zero(theta.size());
  int step = 0;
  std::vector<const Sample*> order;
  for (const auto& s : train_set) order.push_back(&s);
  Rng rng(shuffle_seed);

  const bool use_heldout = !heldout_set.empty() && config.patience > 0;
  double best = use_heldout ? heldout_objective(policy) : 0.0;
  Eigen::VectorXd best_theta = theta;
  int since_best = 0;
  out.best_epoch = epoch_offset;

  for (int e = 1; e <= epochs; ++e) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      std::span<const Sample* const> batch(order.data() + start, end - start);
      const std::vector<double> w = weights_for(batch);
      Eigen::VectorXd grad;
      const double loss = weighted_nll(policy, batch, w, &grad, config.threads);
      if (!std::isfinite(loss) || !grad.allFinite()) {
        std::ostringstream msg;
        msg << "training diverged at epoch " << epoch_offset + e << ": loss=" << loss
            << " |theta|=" << theta.norm();
        throw NumericError(msg.str());
      }
      const double gn = grad.norm();
      if (config.max_grad_norm > 0.0 && gn > config.max_grad_norm) grad *= config.max_grad_norm / gn;
      if (config.adam) {
        ++step;
        velocity = config.momentum * velocity + (1.0 - config.momentum) * grad;
        second = 0.999 * second + 0.001 * grad.cwiseProduct(grad);
        const double c1 = 1.0 - std::pow(config.momentum, step), c2 = 1.0 - std::pow(0.999, step);
        theta.array() -= lr * (velocity.array() / c1) / ((second.array() / c2).sqrt() + 1e-8);
      } else {
        velocity = config.momentum * velocity - lr * grad;
        theta += velocity;
      }
      if (config.weight_decay > 0.0) theta *= 1.0 - lr * config.weight_decay;
      policy.set_flat(theta);
      loss_sum += loss;
      ++batches;
    }
    if (theta.norm() > 1e6) {
      std::ostringstream msg;
      msg << "training diverged at epoch " << epoch_offset + e << ": |theta|=" << theta.norm();
      throw NumericError(msg.str());
    }
    EpochMetrics m;
    m.epoch = epoch_offset + e;
    m.train_ll = mean_log_likelihood(policy, train_set);
    m.heldout_ll = heldout_set.empty() ? 0.0 : mean_log_likelihood(policy, heldout_set);
    m.mean_advantage = mean_advantage;
    m.loss = loss_sum / static_cast<double>(std::max<std::size_t>(1, batches));
    metrics.push_back(m);
    out.stopped_epoch = m.epoch;

    if (use_heldout) {
      const double obj = heldout_objective(policy);
      if (obj < best) {
        best = obj;
        best_theta = theta;
        out.best_epoch = m.epoch;
        since_best = 0;
      } else if (++since_best >= config.patience) {
        out.early_stopped = true;
        break;
      }
    } else {
      out.best_epoch = m.epoch;
      best_theta = theta;
    }
  }
  policy.set_flat(best_theta);
  return out;
}

std::vector<double> ones_for(std::span<const Sample* const> batch) { return std::vector<double>(batch.size(), 1.0); }

ObjectiveFn nll_objective(const std::vector<Sample>& heldout) {
  return [&heldout](const FactorizedPolicy& p) { return -mean_log_likelihood(p, heldout); };
}

ObjectiveFn return_objective(std::span<const ShiftLog> corpus, const std::vector<std::size_t>& shifts,
                             const SimConfig& sim) {
  return [corpus, &shifts, &sim](const FactorizedPolicy& p) {
    double total = 0.0;
    for (auto i : shifts)
      total += run_episode(corpus[i].initial,
                           [&](const SystemState& s) { return policy_decide(p, s, sim).action; }, sim,
                           corpus[i].seed)
                   .total_reward();
    return -total / static_cast<double>(std::max<std::size_t>(1, shifts.size()));
  };
}

ObjectiveFn choose(const TrainConfig& config, ObjectiveFn loss, std::span<const ShiftLog> corpus,
                   const std::vector<std::size_t>& shifts, const SimConfig& sim) {
  if (config.early_stopping == TrainConfig::Stopping::kReturn) return return_objective(corpus, shifts, sim);
  return loss;
}

void check(const TrainConfig& config, std::span<const ShiftLog> corpus) {
  if (corpus.empty()) throw DataError("training: empty corpus");
  if (auto errs = validate_train_config(config); !errs.empty()) throw UsageError("train config: " + errs.front());
}

}  // namespace

std::vector<std::size_t> top_fraction(std::span<const ShiftLog> corpus, double q) {
  if (corpus.empty()) return {};
  const auto count = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::floor(q * static_cast<double>(corpus.size()) + 1e-9)));
  std::vector<std::size_t> idx(corpus.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return corpus[a].total_reward() > corpus[b].total_reward(); });
  idx.resize(count);
  return idx;
}

TrainResult train_bc(std::span<const ShiftLog> corpus, const SimConfig& sim, const TrainConfig& config) {
  check(config, corpus);
  TrainResult r;
  Split split = split_corpus(corpus, sim, config, &r.skipped_samples);
  r.n_train_shifts = split.train_shifts.size();
  r.n_heldout_shifts = split.heldout_shifts.size();
  r.policy = FactorizedPolicy::random(derive_seed(config.seed, 1), config.init_scale, config.key_dim);
  const auto o = optimize(r.policy, split.train, split.heldout, ones_for,
                          choose(config, nll_objective(split.heldout), corpus, split.heldout_shifts, sim), config.epochs,
                          config.learning_rate, config, derive_seed(config.seed, 2), 0, r.metrics, 0.0);
  r.best_epoch = o.best_epoch;
  r.stopped_epoch = o.stopped_epoch;
  r.early_stopped = o.early_stopped;
  return r;
}

TrainResult train_bcft(std::span<const ShiftLog> corpus, const SimConfig& sim, const TrainConfig& config) {
  check(config, corpus);
  TrainResult r;
  Split split = split_corpus(corpus, sim, config, &r.skipped_samples);
  r.n_train_shifts = split.train_shifts.size();
  r.n_heldout_shifts = split.heldout_shifts.size();
  r.policy = FactorizedPolicy::random(derive_seed(config.seed, 1), config.init_scale, config.key_dim);
  const auto o1 = optimize(r.policy, split.train, split.heldout, ones_for,
                           choose(config, nll_objective(split.heldout), corpus, split.heldout_shifts, sim),
                           config.epochs, config.learning_rate, config, derive_seed(config.seed, 2), 0, r.metrics, 0.0);
  const Split top = subset(split, corpus, config.bcft_top_fraction);
  const auto o2 = optimize(r.policy, top.train, top.heldout, ones_for,
                           choose(config, nll_objective(top.heldout), corpus, split.heldout_shifts, sim),
                           config.finetune_epochs, config.learning_rate, config, derive_seed(config.seed, 3),
                           o1.stopped_epoch, r.metrics, 0.0);
  r.best_epoch = o2.best_epoch;
  r.stopped_epoch = o2.stopped_epoch;
  r.early_stopped = o1.early_stopped || o2.early_stopped;
  return r;
}

TrainResult train_offline_ac(std::span<const ShiftLog> corpus, const SimConfig& sim, const TrainConfig& config) {
  check(config, corpus);
  TrainResult r;
  Split split = split_corpus(corpus, sim, config, &r.skipped_samples);
  r.n_train_shifts = split.train_shifts.size();
  r.n_heldout_shifts = split.heldout_shifts.size();

  // Critic: least squares of G_t on the training transitions. Returns are
  // Monte-Carlo and do not depend on the actor, so one fit suffices.
  std::vector<ValueFeatureVec> phi;
  std::vector<double> targets;
  for (const auto& s : split.train) {
    phi.push_back(s.value_phi);
    targets.push_back(s.ret);
  }
  const ValueModel value = fit_value(phi, targets);
  double mean_a = 0.0;
  for (auto* set : {&split.train, &split.heldout})
    for (auto& s : *set) s.advantage = s.ret - value.predict(s.value_phi);
  for (const auto& s : split.train) mean_a += s.advantage;
  mean_a /= static_cast<double>(std::max<std::size_t>(1, split.train.size()));

  const double alpha = config.alpha;
  const bool standardize_on = config.standardize_advantages;
  // Weights (A + alpha) / (1 + alpha): same minimiser as the unscaled
  // objective, and exactly the BC weights in the large-alpha limit.
  auto weights_for = [alpha, standardize_on](std::span<const Sample* const> batch) {
    std::vector<double> a;
    for (const auto* s : batch) a.push_back(s->advantage);
    if (standardize_on) standardize(a);
    for (double& v : a) v = (v + alpha) / (1.0 + alpha);
    return a;
  };
  std::vector<const Sample*> held_ptrs;
  for (const auto& s : split.heldout) held_ptrs.push_back(&s);
  const std::vector<double> held_w = weights_for(held_ptrs);
  auto heldout_loss = [&](const FactorizedPolicy& p) { return weighted_nll(p, held_ptrs, held_w, nullptr); };

  r.policy = FactorizedPolicy::random(derive_seed(config.seed, 1), config.init_scale, config.key_dim);
  const auto o = optimize(r.policy, split.train, split.heldout, weights_for,
                          choose(config, heldout_loss, corpus, split.heldout_shifts, sim), config.epochs,
                          config.learning_rate, config, derive_seed(config.seed, 2), 0, r.metrics,
                          mean_a);
  r.value = value;
  r.best_epoch = o.best_epoch;
  r.stopped_epoch = o.stopped_epoch;
  r.early_stopped = o.early_stopped;
  return r;
}

TrainResult train(TrainMethod method, std::span<const ShiftLog> corpus, const SimConfig& sim,
                  const TrainConfig& config) {
  switch (method) {
    case TrainMethod::kBC:
      return train_bc(corpus, sim, config);
    case TrainMethod::kBCFT:
      return train_bcft(corpus, sim, config);
    case TrainMethod::kAC:
      return train_offline_ac(corpus, sim, config);
  }
  throw UsageError("unknown training method");
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

json tensor(const double* data, std::vector<Eigen::Index> shape) {
  Eigen::Index n = 1;
  for (auto d : shape) n *= d;
  return {{"shape", shape}, {"order", "col"}, {"data", std::vector<double>(data, data + n)}};
}

Eigen::MatrixXd read_matrix(const json& t, Eigen::Index rows) {
  const auto shape = t.at("shape").get<std::vector<Eigen::Index>>();
  const auto data = t.at("data").get<std::vector<double>>();
  if (shape.size() != 2 || shape[0] != rows || shape[0] * shape[1] != static_cast<Eigen::Index>(data.size()))
    throw DataError("checkpoint: bad tensor shape");
  Eigen::MatrixXd m(shape[0], shape[1]);
  std::copy(data.begin(), data.end(), m.data());
  if (!m.allFinite()) throw DataError("checkpoint: non-finite parameters");
  return m;
}

}  // namespace

json checkpoint_to_json(const FactorizedPolicy& policy, const ValueModel* value, const json& train_info) {
  json j{{"schema_version", 1},
         {"kind", "sortsim.factorized_policy"},
         {"feature_dim", kFeatureDim},
         {"key_dim", policy.key_dim()},
         {"temperature", policy.temperature},
         {"stay_threshold", policy.stay_threshold},
         {"params",
          {{"w_query", tensor(policy.w_query.data(), {policy.w_query.rows(), policy.w_query.cols()})},
           {"w_key", tensor(policy.w_key.data(), {policy.w_key.rows(), policy.w_key.cols()})}}}};
  if (value) {
    j["value"] = {{"w", tensor(value->w.data(), {value->w.size()})}, {"b", value->b}};
  }
  if (!train_info.is_null()) j["train"] = train_info;
  return j;
}

FactorizedPolicy policy_from_checkpoint(const json& j) {
  try {
    if (j.value("kind", "") != "sortsim.factorized_policy" || j.value("schema_version", 0) != 1)
      throw DataError("checkpoint: not a schema-1 factorized policy");
    if (j.at("feature_dim").get<int>() != kFeatureDim) throw DataError("checkpoint: feature_dim mismatch");
    FactorizedPolicy p;
    p.w_query = read_matrix(j.at("params").at("w_query"), kFeatureDim);
    p.w_key = read_matrix(j.at("params").at("w_key"), kFeatureDim);
    if (p.w_query.cols() != p.w_key.cols()) throw DataError("checkpoint: query/key dims differ");
    p.temperature = j.value("temperature", 1.0);
    p.stay_threshold = j.value("stay_threshold", 0.1);
    if (!(p.temperature > 0.0)) throw DataError("checkpoint: temperature must be > 0");
    return p;
  } catch (const json::exception& e) {
    throw DataError(std::string("checkpoint: ") + e.what());
  }
}

std::optional<ValueModel> value_from_checkpoint(const json& j) {
  if (!j.contains("value")) return std::nullopt;
  try {
    ValueModel v;
    const auto data = j.at("value").at("w").at("data").get<std::vector<double>>();
    if (data.size() != kValueFeatureDim) throw DataError("checkpoint: value weight size mismatch");
    v.w = Eigen::Map<const Eigen::VectorXd>(data.data(), kValueFeatureDim);
    v.b = j.at("value").at("b").get<double>();
    return v;
  } catch (const json::exception& e) {
    throw DataError(std::string("checkpoint: ") + e.what());
  }
}

std::string metrics_csv(const std::vector<EpochMetrics>& metrics) {
  std::ostringstream out;
  out << "epoch,train_ll,heldout_ll,mean_A,loss\n";
  char buf[256];
  for (const auto& m : metrics) {
    std::snprintf(buf, sizeof buf, "%d,%.10g,%.10g,%.10g,%.10g\n", m.epoch, m.train_ll, m.heldout_ll,
                  m.mean_advantage, m.loss);
    out << buf;
  }
  return out.str();
}

}  // namespace sortsim

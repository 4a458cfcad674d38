#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "sortsim/agents.hpp"
#include "sortsim/model.hpp"
#include "sortsim/rng.hpp"

namespace sortsim {

// ---------------------------------------------------------------------------
// Position features
//
// Every worker on the floor is an occupied position. Its destination set is
// its own cell (stay) plus every other cell with a free slot before the action
// is applied; full cells are masked out.
//
// Feature layout (kFeatureDim = 16), shared by query and key vectors:
//   0 bias                    8  stage throughput last tick / stage max
//   1-3 stage one-hot         9  marginal gain of +1 worker / max base rate
//   4 line active             10 marginal loss of -1 worker / max base rate
//   5 upstream fill           11 tick fraction t / T
//   6 downstream fill         12 cooldown (query: own flag; key: cell fraction)
//   7 staffing fraction       13 query: mover-candidate flag; key: is own cell
//                             14 query: 1; key: same line as the worker
//                             15 query: best heuristic net gain of moving out;
//                                key: best net gain of moving in minus the
//                                best over all pairs (both / max base rate)

inline constexpr int kFeatureDim = 16;
inline constexpr int kDefaultKeyDim = 8;

using FeatureVec = Eigen::Matrix<double, kFeatureDim, 1>;

struct PositionFeatures {
  struct Worker {
    int worker = -1;  // index into SystemState::assignment
    int cell = -1;    // line * 3 + stage
    FeatureVec query;
    std::vector<int> destinations;  // destinations[0] == cell (stay)
  };

  int n_lines = 0;
  std::vector<FeatureVec> cell;  // key features with the relational slots zeroed
  std::vector<Worker> workers;
  std::vector<int> free_slots;  // per cell, before the action

  int n_cells() const { return static_cast<int>(cell.size()); }
  /// Key vector for worker slot `w` looking at destination cell `d`.
  FeatureVec key(int w, int d) const;
};

PositionFeatures extract_features(const SystemState& state, const SimConfig& config);

// ---------------------------------------------------------------------------
// Factorized reallocation policy

struct FactorizedPolicy {
  Eigen::MatrixXd w_query;  // kFeatureDim x key_dim
  Eigen::MatrixXd w_key;    // kFeatureDim x key_dim
  double temperature = 1.0;
  double stay_threshold = 0.1;

  static FactorizedPolicy zeros(int key_dim = kDefaultKeyDim);
  static FactorizedPolicy random(std::uint64_t seed, double scale = 0.1, int key_dim = kDefaultKeyDim);
  int key_dim() const { return static_cast<int>(w_query.cols()); }
  std::size_t n_params() const { return static_cast<std::size_t>(w_query.size() + w_key.size()); }
  /// Flat parameter view: w_query (column-major) followed by w_key.
  Eigen::VectorXd flat() const;
  void set_flat(const Eigen::VectorXd& theta);
};

/// Softmax over one worker's destinations (index 0 = stay).
Eigen::VectorXd destination_probs(const FactorizedPolicy& policy, const PositionFeatures& f, int worker_slot);

/// The destination index each worker takes under `action`, or throws
/// DataError when the action involves a masked destination or an off-floor
/// worker (likelihood undefined).
std::vector<int> chosen_destinations(const PositionFeatures& f, const Action& action);

double action_log_prob(const FactorizedPolicy& policy, const PositionFeatures& f, const Action& action);

enum class DecodeMode { kGreedy, kSample };

/// Greedy: a worker moves to its argmax destination only if p(stay) is below
/// the stay threshold. Sample: each worker samples from its distribution.
/// Movers claim free slots in descending (1 - p(stay)) order; a mover whose
/// target has no slot left stays.
PolicyDecision decode_action(const FactorizedPolicy& policy, const PositionFeatures& f,
                             DecodeMode mode = DecodeMode::kGreedy, Rng* rng = nullptr);

/// Convenience: features + greedy decode.
PolicyDecision policy_decide(const FactorizedPolicy& policy, const SystemState& state, const SimConfig& config);

// ---------------------------------------------------------------------------
// Value baseline

inline constexpr int kValueFeatureDim = 22;
using ValueFeatureVec = Eigen::Matrix<double, kValueFeatureDim, 1>;

/// Aggregate state features: fills, staffing per stage, throughput, backlog,
/// each both raw and scaled by the remaining-time fraction.
ValueFeatureVec value_features(const SystemState& state, const SimConfig& config);

struct ValueModel {
  Eigen::VectorXd w = Eigen::VectorXd::Zero(kValueFeatureDim);
  double b = 0.0;

  double predict(const ValueFeatureVec& phi) const { return w.dot(phi) + b; }
};

/// Ridge-regularised least squares (ridge on w only).
ValueModel fit_value(std::span<const ValueFeatureVec> phi, std::span<const double> targets, double ridge = 1e-6);

// ---------------------------------------------------------------------------
// Training

enum class TrainMethod { kBC, kBCFT, kAC };

std::string method_name(TrainMethod m);
std::optional<TrainMethod> parse_method(const std::string& name);

struct TrainConfig {
  double alpha = 0.1;  // behavioral-regularization strength
  double gamma = 1.0;  // discount
  double learning_rate = 0.03;
  double momentum = 0.9;  // first-moment decay (adam) or heavy-ball coefficient (sgd)
  bool adam = true;
  int batch_size = 256;
  int epochs = 40;
  int finetune_epochs = 20;  // BC-FT second phase
  double bcft_top_fraction = 0.25;
  bool standardize_advantages = true;
  int patience = 6;  // early-stopping patience in epochs (0 = off)
  // Held-out criterion. kReturn rolls the greedy-decoded policy out from the
  // held-out shifts' initial states and maximises mean shift reward; kLoss
  // minimises the method's own loss on held-out transitions.
  enum class Stopping { kLoss, kReturn } early_stopping = Stopping::kReturn;
  double heldout_fraction = 0.2;
  double max_grad_norm = 5.0;
  double weight_decay = 0.0;  // decoupled, per step: theta *= 1 - lr * weight_decay
  int key_dim = kDefaultKeyDim;
  double init_scale = 0.1;
  int threads = 1;
  std::uint64_t seed = 1;
};

std::vector<std::string> validate_train_config(const TrainConfig& cfg);
json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const json& j);

struct TrajectoryReturns {
  std::vector<double> rewards, returns, values, advantages;
};

/// Monte-Carlo returns G_t = r_t + gamma G_{t+1} and advantages G_t - V(s_t).
TrajectoryReturns compute_returns(const ShiftLog& log, const ValueModel& value, const SimConfig& sim,
                                  const TrainConfig& config);

/// Returns for several logs; advantages standardized jointly (mean 0, std 1)
/// when config.standardize_advantages is set.
std::vector<TrajectoryReturns> compute_returns(std::span<const ShiftLog> logs, const ValueModel& value,
                                               const SimConfig& sim, const TrainConfig& config);

void standardize(std::span<double> values);

/// One transition prepared for gradient computation.
struct Sample {
  PositionFeatures features;
  std::vector<int> chosen;  // per worker slot
  double ret = 0.0;         // G_t
  double advantage = 0.0;   // raw G_t - V(s_t)
  ValueFeatureVec value_phi;
  int shift = 0;
};

/// Transitions of every log; ticks whose action has undefined likelihood are
/// skipped and counted in `skipped` when non-null.
std::vector<Sample> build_samples(std::span<const ShiftLog> logs, const SimConfig& sim, const TrainConfig& config,
                                  std::size_t* skipped = nullptr);

/// Weighted negative log-likelihood  L = -(1/N) sum_i weight_i log pi(a_i|s_i)
/// and its gradient w.r.t. the flat parameters. BC uses weight 1; the offline
/// actor-critic loss uses weight A_i + alpha (A_i held constant); training
/// divides those weights by 1 + alpha.
double weighted_nll(const FactorizedPolicy& policy, std::span<const Sample* const> batch,
                    std::span<const double> weights, Eigen::VectorXd* grad, int threads = 1);

double mean_log_likelihood(const FactorizedPolicy& policy, std::span<const Sample> samples);

struct EpochMetrics {
  int epoch = 0;
  double train_ll = 0.0;
  double heldout_ll = 0.0;
  double mean_advantage = 0.0;
  double loss = 0.0;
};

struct TrainResult {
  FactorizedPolicy policy;
  std::optional<ValueModel> value;
  std::vector<EpochMetrics> metrics;
  int best_epoch = 0;
  int stopped_epoch = 0;
  bool early_stopped = false;
  std::size_t skipped_samples = 0;
  std::size_t n_train_shifts = 0;
  std::size_t n_heldout_shifts = 0;
};

TrainResult train_bc(std::span<const ShiftLog> corpus, const SimConfig& sim, const TrainConfig& config);
TrainResult train_bcft(std::span<const ShiftLog> corpus, const SimConfig& sim, const TrainConfig& config);
TrainResult train_offline_ac(std::span<const ShiftLog> corpus, const SimConfig& sim, const TrainConfig& config);
TrainResult train(TrainMethod method, std::span<const ShiftLog> corpus, const SimConfig& sim,
                  const TrainConfig& config);

/// Indices of the top-q fraction of shifts by cumulative reward (at least one).
std::vector<std::size_t> top_fraction(std::span<const ShiftLog> corpus, double q);

// Checkpoints: JSON with shape-tagged flat arrays.
json checkpoint_to_json(const FactorizedPolicy& policy, const ValueModel* value, const json& train_info = {});
FactorizedPolicy policy_from_checkpoint(const json& j);
std::optional<ValueModel> value_from_checkpoint(const json& j);

std::string metrics_csv(const std::vector<EpochMetrics>& metrics);

}  // namespace sortsim

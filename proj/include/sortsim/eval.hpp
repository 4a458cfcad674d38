#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sortsim/agents.hpp"
#include "sortsim/model.hpp"
#include "sortsim/sim.hpp"

namespace sortsim {

// ---------------------------------------------------------------------------
// Synthetic corpus

struct CorpusParams {
  int n_shifts = 300;
  ScenarioParams scenario{};
  ScriptedManagerConfig manager{};
  std::uint64_t seed = 1;
};

std::vector<std::string> validate_corpus_params(const CorpusParams& p);
json to_json(const ScenarioParams& p);
ScenarioParams scenario_from_json(const json& j);
json to_json(const CorpusParams& p);
/// Missing keys keep their defaults.
CorpusParams corpus_params_from_json(const json& j);

/// Shift i uses seed derive_seed(seed, i) for its initial state, skill tier,
/// manager noise and jams. shift_id is "shift-<i>" zero-padded to 5 digits.
std::vector<ShiftLog> generate_corpus(const SimConfig& config, const CorpusParams& params, int threads = 1);

// ---------------------------------------------------------------------------
// Replay

/// Re-runs the logged actions from the log's initial state with the log's
/// seed. Actions invalid under `config` become no-ops with an event.
ShiftLog replay(const ShiftLog& log, const SimConfig& config);

/// Rolls `policy` out from the log's initial state with the log's seed.
ShiftLog rollout_from(const ShiftLog& log, const Policy& policy, const SimConfig& config);

// ---------------------------------------------------------------------------
// Improvement statistics

struct BootstrapParams {
  int resamples = 1000;
  double confidence = 0.95;
  std::uint64_t seed = 1;
};

struct Improvement {
  double mean_policy = 0.0;
  double mean_replay = 0.0;
  double point = 0.0;  // relative gain; 0.024 means +2.4%
  double ci_lo = 0.0, ci_hi = 0.0;
  std::size_t n = 0;
};

/// Paired percentile bootstrap over shifts of (mean policy - mean replay) /
/// mean replay. The interval is widened to contain the point estimate.
/// Throws UsageError on unequal or empty inputs, NumericError on a zero
/// replay mean.
Improvement improvement(std::span<const double> policy_totals, std::span<const double> replay_totals,
                        const BootstrapParams& params = {});

/// Log-level variant: shifts are paired by initial-state digest and sorted by
/// the replay log's shift_id. Throws DataError when the sets differ.
Improvement improvement(std::span<const ShiftLog> policy_logs, std::span<const ShiftLog> replay_logs,
                        const BootstrapParams& params = {});

struct MethodResult {
  std::string name;
  double mean_output = 0.0;  // per shift
  Improvement vs_replay;
  double moves_per_shift = 0.0;
};

struct EvalReport {
  std::vector<MethodResult> methods;  // replay first, then no_reallocation, then the rest
  std::size_t n_shifts = 0;
  BootstrapParams bootstrap;
  json seeds = json::object();
  /// Intervals reflect resampling of evaluation shifts only.
  static const char* const kCaveat;
};

json to_json(const EvalReport& report);
std::string format_eval_table(const EvalReport& report);

struct NamedPolicy {
  std::string name;
  Policy policy;  // must be safe to call from several threads
};

struct EvalOptions {
  BootstrapParams bootstrap{};
  bool include_no_reallocation = true;
  int threads = 1;
};

/// Replays every log, rolls out each policy from the same initial states and
/// seeds, and reports improvement over the replayed baseline.
EvalReport evaluate(std::span<const ShiftLog> corpus, const std::vector<NamedPolicy>& policies,
                    const SimConfig& config, const EvalOptions& options = {});

// ---------------------------------------------------------------------------
// Calibration metrics

struct Wape {
  double value = 0.0;        // NaN when the denominator is exactly zero
  double numerator = 0.0;    // sum |pred - actual|
  double denominator = 0.0;  // sum |actual|
  bool small_denominator = false;
};

/// Mean |actual| below which a WAPE is flagged as unreliable.
inline constexpr double kSmallWapeDenominator = 1e-6;

/// sum |pred - actual| / sum |actual|. Throws UsageError on unequal lengths
/// or empty series.
Wape wape(std::span<const double> predicted, std::span<const double> actual);

/// Stage throughputs 1..3 then buffer states 1..4.
inline constexpr int kCalibrationMetrics = 7;
std::string calibration_metric_name(int k);

/// Per-tick series pooled over every shift of a corpus, each value summed
/// over lines: stage flows by stage, buffer levels by reporting label.
struct MetricSeries {
  std::array<std::vector<double>, kCalibrationMetrics> series;
};

MetricSeries observed_series(std::span<const ShiftLog> corpus, const SimConfig& config);

struct ScatterPoint {
  std::string shift_id;
  double predicted = 0.0;  // output per tick
  double actual = 0.0;
};

struct Scatter {
  std::vector<ScatterPoint> points;
  double r2 = 0.0;  // NaN when undefined
  bool r2_defined = true;
};

/// R^2 = 1 - SS_res / SS_tot; undefined (flagged) when SS_tot = 0.
/// Throws DataError with fewer than two points.
Scatter r_squared(std::vector<ScatterPoint> points);

/// Per-shift output rates of each log against its replay under `config`.
Scatter scatter_export(std::span<const ShiftLog> corpus, const SimConfig& config, int threads = 1);
std::string scatter_csv(const Scatter& scatter);

struct CalibrationReport {
  std::array<Wape, kCalibrationMetrics> wapes;
  Scatter scatter;
  std::size_t n_shifts = 0;
  std::size_t n_ticks = 0;
};

/// Replays the corpus under `config` and compares with the logged series.
CalibrationReport calibration_report(std::span<const ShiftLog> corpus, const SimConfig& config, int threads = 1);
json to_json(const CalibrationReport& report);
std::string format_calibration_table(const CalibrationReport& report);

// ---------------------------------------------------------------------------
// Calibration search

/// Parameter names: base_rate.1, base_rate.2, base_rate.3, throttle_knee,
/// throttle_floor, jam_coupling, dispatch_rate.
struct ParamGrid {
  std::string name;
  std::vector<double> values;
};

struct SearchSpace {
  std::vector<ParamGrid> params;  // tie order between equally good changes
  int max_sweeps = 20;
};

std::vector<std::string> calibration_param_names();
double get_param(const SimConfig& config, const std::string& name);
void set_param(SimConfig& config, const std::string& name, double value);

/// Every designated parameter on the grid initial * {0.8, 0.9, 1.0, 1.1, 1.2}.
SearchSpace default_search_space(const SimConfig& initial);
/// {"max_sweeps", "params": [{"name", "values": [...]} or {"name", "relative": [...]}]};
/// relative entries multiply the initial value.
SearchSpace search_space_from_json(const json& j, const SimConfig& initial);
json to_json(const SearchSpace& space);

struct CalibrationStep {
  int sweep = 0;
  std::string param;
  double value = 0.0;
  double primary = 0.0;    // stage-3 throughput WAPE
  double secondary = 0.0;  // sum of the other six WAPEs
};

struct CalibrationResult {
  SimConfig config;
  CalibrationReport report;
  std::vector<CalibrationStep> trace;  // one entry per accepted change
  int sweeps = 0;
  std::size_t evaluations = 0;
};

/// Coordinate descent with the best-coordinate rule: each sweep scores every
/// grid value of every parameter with the others held, then applies the one
/// change with the lowest (primary, secondary) pair if it strictly beats the
/// current config. Stops when nothing improves or after max_sweeps.
/// Throws UsageError on an empty search space, an unknown parameter, an empty
/// grid or a grid value making the config invalid.
CalibrationResult calibrate(std::span<const ShiftLog> corpus, const SimConfig& initial, const SearchSpace& space,
                            int threads = 1);
json to_json(const CalibrationResult& result);

}  // namespace sortsim

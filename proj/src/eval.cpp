#include "sortsim/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>
#include <tuple>

#include "sortsim/errors.hpp"
#include "sortsim/parallel.hpp"
#include "sortsim/rng.hpp"

namespace sortsim {

namespace {

constexpr double kTieTolerance = 1e-12;

std::string pad_index(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "shift-%05zu", i);
  return buf;
}

double quantile(const std::vector<double>& sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

std::size_t count_moves(const ShiftLog& log) {
  std::size_t n = 0;
  for (const auto& t : log.ticks) n += t.action.moves.size();
  return n;
}

double output_rate(const ShiftLog& log) {
  return log.total_reward() / static_cast<double>(std::max<std::size_t>(1, log.ticks.size()));
}

std::string percent(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%+.2f%%", 100.0 * v);
  return buf;
}

json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

}  // namespace

// ---------------------------------------------------------------------------
// Corpus

std::vector<std::string> validate_corpus_params(const CorpusParams& p) {
  std::vector<std::string> errs;
  if (p.n_shifts < 1) errs.push_back("n_shifts: must be >= 1");
  if (p.scenario.n_workers < 0) errs.push_back("scenario.n_workers: must be >= 0");
  if (p.scenario.max_initial_fill < 0.0 || p.scenario.max_initial_fill > 1.0)
    errs.push_back("scenario.max_initial_fill: must lie in [0, 1]");
  if (p.scenario.n_misplaced < 0) errs.push_back("scenario.n_misplaced: must be >= 0");
  for (auto& e : validate_manager_config(p.manager)) errs.push_back("manager." + e);
  return errs;
}

json to_json(const ScenarioParams& p) {
  return {{"n_workers", p.n_workers}, {"max_initial_fill", p.max_initial_fill}, {"n_misplaced", p.n_misplaced}};
}

ScenarioParams scenario_from_json(const json& j) {
  if (!j.is_object()) throw DataError("scenario: expected a JSON object");
  ScenarioParams p;
  try {
    p.n_workers = j.value("n_workers", p.n_workers);
    p.max_initial_fill = j.value("max_initial_fill", p.max_initial_fill);
    p.n_misplaced = j.value("n_misplaced", p.n_misplaced);
  } catch (const json::exception& e) {
    throw DataError(std::string("scenario: ") + e.what());
  }
  return p;
}

json to_json(const CorpusParams& p) {
  return {{"n_shifts", p.n_shifts}, {"scenario", to_json(p.scenario)}, {"manager", to_json(p.manager)}, {"seed", p.seed}};
}

CorpusParams corpus_params_from_json(const json& j) {
  if (!j.is_object()) throw DataError("corpus: expected a JSON object");
  CorpusParams p;
  try {
    p.n_shifts = j.value("n_shifts", p.n_shifts);
    p.seed = j.value("seed", p.seed);
    if (j.contains("scenario")) p.scenario = scenario_from_json(j.at("scenario"));
    if (j.contains("manager")) p.manager = manager_config_from_json(j.at("manager"));
  } catch (const json::exception& e) {
    throw DataError(std::string("corpus: ") + e.what());
  }
  return p;
}

std::vector<ShiftLog> generate_corpus(const SimConfig& config, const CorpusParams& params, int threads) {
  if (auto errs = validate_config(config); !errs.empty()) throw UsageError("config: " + errs.front());
  if (auto errs = validate_corpus_params(params); !errs.empty()) throw UsageError("corpus: " + errs.front());
  std::vector<ShiftLog> corpus(static_cast<std::size_t>(params.n_shifts));
  parallel_for(corpus.size(), threads, [&](std::size_t i) {
    const std::uint64_t seed = derive_seed(params.seed, i);
    const SystemState initial = make_initial_state(config, params.scenario, seed);
    const double tier = draw_skill_tier(params.manager, seed);
    ShiftLog log = run_episode(
        initial,
        [&](const SystemState& s) { return scripted_manager(s, config, params.manager, tier, seed).action; },
        config, seed);
    log.shift_id = pad_index(i);
    log.meta = {{"source", "scripted_manager"}, {"skill_tier", tier}, {"index", i}};
    corpus[i] = std::move(log);
  });
  return corpus;
}

// ---------------------------------------------------------------------------
// Replay

ShiftLog replay(const ShiftLog& log, const SimConfig& config) {
  const int start = log.initial.tick;
  ShiftLog out = run_episode(
      log.initial,
      [&](const SystemState& s) {
        const int k = s.tick - start;
        if (k < 0 || k >= static_cast<int>(log.ticks.size())) return Action{};
        return log.ticks[static_cast<std::size_t>(k)].action;
      },
      config, log.seed);
  out.shift_id = log.shift_id;
  out.meta = log.meta;
  return out;
}

ShiftLog rollout_from(const ShiftLog& log, const Policy& policy, const SimConfig& config) {
  ShiftLog out = run_episode(log.initial, policy, config, log.seed);
  out.shift_id = log.shift_id;
  return out;
}

// ---------------------------------------------------------------------------
// Improvement

const char* const EvalReport::kCaveat =
    "95% intervals are percentile bootstrap intervals over evaluation shifts; they capture evaluation variance "
    "only, not training variance.";

Improvement improvement(std::span<const double> policy_totals, std::span<const double> replay_totals,
                        const BootstrapParams& params) {
  if (policy_totals.size() != replay_totals.size())
    throw UsageError("improvement: policy and replay sets differ in size");
  if (policy_totals.empty()) throw UsageError("improvement: no shifts");
  if (params.resamples < 1) throw UsageError("improvement: resamples must be >= 1");
  if (!(params.confidence > 0.0 && params.confidence < 1.0))
    throw UsageError("improvement: confidence must lie in (0, 1)");

  const std::size_t n = policy_totals.size();
  Improvement r;
  r.n = n;
  const double sp = std::accumulate(policy_totals.begin(), policy_totals.end(), 0.0);
  const double sr = std::accumulate(replay_totals.begin(), replay_totals.end(), 0.0);
  r.mean_policy = sp / static_cast<double>(n);
  r.mean_replay = sr / static_cast<double>(n);
  if (sr == 0.0) throw NumericError("improvement: replay mean is zero");
  r.point = (sp - sr) / sr;

  Rng rng(derive_seed(params.seed, 0xb0075ULL));
  std::vector<double> stats;
  stats.reserve(static_cast<std::size_t>(params.resamples));
  for (int b = 0; b < params.resamples; ++b) {
    double a = 0.0, c = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t k = rng.below(n);
      a += policy_totals[k];
      c += replay_totals[k];
    }
    if (c != 0.0) stats.push_back((a - c) / c);
  }
  if (stats.empty()) throw NumericError("improvement: every bootstrap resample has a zero replay total");
  std::sort(stats.begin(), stats.end());
  const double tail = (1.0 - params.confidence) / 2.0;
  r.ci_lo = std::min(quantile(stats, tail), r.point);
  r.ci_hi = std::max(quantile(stats, 1.0 - tail), r.point);
  return r;
}

Improvement improvement(std::span<const ShiftLog> policy_logs, std::span<const ShiftLog> replay_logs,
                        const BootstrapParams& params) {
  if (policy_logs.size() != replay_logs.size())
    throw DataError("improvement: policy and replay sets cover different shifts");
  std::map<std::string, std::vector<std::size_t>> by_digest;
  for (std::size_t i = 0; i < policy_logs.size(); ++i) by_digest[state_digest(policy_logs[i].initial)].push_back(i);

  std::vector<std::size_t> order(replay_logs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return replay_logs[a].shift_id < replay_logs[b].shift_id; });
  std::vector<double> pol, rep;
  for (std::size_t i : order) {
    auto it = by_digest.find(state_digest(replay_logs[i].initial));
    if (it == by_digest.end() || it->second.empty())
      throw DataError("improvement: no policy log starts from the initial state of '" + replay_logs[i].shift_id + "'");
    pol.push_back(policy_logs[it->second.front()].total_reward());
    it->second.erase(it->second.begin());
    rep.push_back(replay_logs[i].total_reward());
  }
  return improvement(pol, rep, params);
}

json to_json(const EvalReport& report) {
  json methods = json::array();
  for (const auto& m : report.methods) {
    methods.push_back({{"name", m.name},
                       {"mean_output", m.mean_output},
                       {"improvement", m.vs_replay.point},
                       {"ci95", {m.vs_replay.ci_lo, m.vs_replay.ci_hi}},
                       {"moves_per_shift", m.moves_per_shift}});
  }
  return {{"methods", methods},
          {"n_shifts", report.n_shifts},
          {"bootstrap",
           {{"resamples", report.bootstrap.resamples},
            {"confidence", report.bootstrap.confidence},
            {"seed", report.bootstrap.seed},
            {"method", "percentile"}}},
          {"seeds", report.seeds},
          {"caveat", EvalReport::kCaveat}};
}

std::string format_eval_table(const EvalReport& report) {
  std::ostringstream os;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-20s %12s %12s %24s %8s\n", "method", "mean output", "improvement", "95% CI",
                "moves");
  os << buf;
  for (const auto& m : report.methods) {
    const std::string ci = "[" + percent(m.vs_replay.ci_lo) + ", " + percent(m.vs_replay.ci_hi) + "]";
    std::snprintf(buf, sizeof buf, "%-20s %12.1f %12s %24s %8.2f\n", m.name.c_str(), m.mean_output,
                  percent(m.vs_replay.point).c_str(), ci.c_str(), m.moves_per_shift);
    os << buf;
  }
  os << "n_shifts " << report.n_shifts << "\n";
  return os.str();
}

EvalReport evaluate(std::span<const ShiftLog> corpus, const std::vector<NamedPolicy>& policies,
                    const SimConfig& config, const EvalOptions& options) {
  if (corpus.empty()) throw UsageError("evaluate: empty corpus");
  if (auto errs = validate_config(config); !errs.empty()) throw UsageError("config: " + errs.front());

  std::vector<NamedPolicy> all;
  if (options.include_no_reallocation)
    all.push_back({"no_reallocation", [](const SystemState& s) { return no_reallocation(s).action; }});
  all.insert(all.end(), policies.begin(), policies.end());

  const std::size_t n = corpus.size();
  std::vector<double> replay_totals(n);
  std::vector<std::size_t> replay_moves(n);
  std::vector<std::vector<double>> totals(all.size(), std::vector<double>(n));
  std::vector<std::vector<std::size_t>> moves(all.size(), std::vector<std::size_t>(n));
  parallel_for(n, options.threads, [&](std::size_t i) {
    const ShiftLog base = replay(corpus[i], config);
    replay_totals[i] = base.total_reward();
    replay_moves[i] = count_moves(base);
    for (std::size_t m = 0; m < all.size(); ++m) {
      const ShiftLog log = rollout_from(corpus[i], all[m].policy, config);
      totals[m][i] = log.total_reward();
      moves[m][i] = count_moves(log);
    }
  });

  // Statistics in shift_id order, independent of corpus order.
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return corpus[a].shift_id < corpus[b].shift_id; });
  auto permute = [&](const std::vector<double>& v) {
    std::vector<double> out;
    out.reserve(n);
    for (std::size_t i : order) out.push_back(v[i]);
    return out;
  };
  auto mean_moves = [&](const std::vector<std::size_t>& v) {
    return static_cast<double>(std::accumulate(v.begin(), v.end(), std::size_t{0})) / static_cast<double>(n);
  };

  EvalReport report;
  report.n_shifts = n;
  report.bootstrap = options.bootstrap;
  const std::vector<double> rep = permute(replay_totals);
  MethodResult base{"replay", 0.0, improvement(rep, rep, options.bootstrap), mean_moves(replay_moves)};
  base.mean_output = base.vs_replay.mean_replay;
  report.methods.push_back(base);
  for (std::size_t m = 0; m < all.size(); ++m) {
    MethodResult r{all[m].name, 0.0, improvement(permute(totals[m]), rep, options.bootstrap), mean_moves(moves[m])};
    r.mean_output = r.vs_replay.mean_policy;
    report.methods.push_back(r);
  }
  json shift_seeds = json::array();
  for (std::size_t i : order) shift_seeds.push_back(corpus[i].seed);
  report.seeds = {{"bootstrap", options.bootstrap.seed}, {"shifts", shift_seeds}};
  return report;
}

// ---------------------------------------------------------------------------
// Calibration metrics

Wape wape(std::span<const double> predicted, std::span<const double> actual) {
  if (predicted.size() != actual.size()) throw UsageError("wape: series lengths differ");
  if (actual.empty()) throw UsageError("wape: empty series");
  Wape w;
  for (std::size_t i = 0; i < actual.size(); ++i) {
    w.numerator += std::abs(predicted[i] - actual[i]);
    w.denominator += std::abs(actual[i]);
  }
  w.small_denominator = w.denominator / static_cast<double>(actual.size()) < kSmallWapeDenominator;
  w.value = w.denominator > 0.0 ? w.numerator / w.denominator : std::numeric_limits<double>::quiet_NaN();
  return w;
}

std::string calibration_metric_name(int k) {
  if (k < 0 || k >= kCalibrationMetrics) throw UsageError("calibration metric index out of range");
  if (k < kStages) return "stage" + std::to_string(k + 1) + "_throughput";
  return "buffer_state_" + std::to_string(k - kStages + 1);
}

MetricSeries observed_series(std::span<const ShiftLog> corpus, const SimConfig& config) {
  MetricSeries out;
  for (const auto& log : corpus) {
    for (const auto& t : log.ticks) {
      if (t.stage_flows.size() != t.buffer_levels.size())
        throw DataError("log '" + log.shift_id + "': stage flows and buffer levels cover different lines");
      StageArray flow{};
      BufferArray level{};
      for (std::size_t l = 0; l < t.stage_flows.size(); ++l) {
        for (int s = 0; s < kStages; ++s) flow[s] += t.stage_flows[l][s];
        for (int b = 0; b < kBuffers; ++b) level[b] += t.buffer_levels[l][b];
      }
      for (int s = 0; s < kStages; ++s) out.series[s].push_back(flow[s]);
      for (int b = 0; b < kBuffers; ++b)
        out.series[kStages + config.buffer_state_labels[b] - 1].push_back(level[b]);
    }
  }
  return out;
}

Scatter r_squared(std::vector<ScatterPoint> points) {
  if (points.size() < 2) throw DataError("r_squared: needs at least two points");
  Scatter s;
  s.points = std::move(points);
  double mean = 0.0;
  for (const auto& p : s.points) mean += p.actual;
  mean /= static_cast<double>(s.points.size());
  double ss_tot = 0.0, ss_res = 0.0;
  for (const auto& p : s.points) {
    ss_tot += (p.actual - mean) * (p.actual - mean);
    ss_res += (p.actual - p.predicted) * (p.actual - p.predicted);
  }
  s.r2_defined = ss_tot > 0.0;
  s.r2 = s.r2_defined ? 1.0 - ss_res / ss_tot : std::numeric_limits<double>::quiet_NaN();
  return s;
}

namespace {

std::vector<ShiftLog> replay_all(std::span<const ShiftLog> corpus, const SimConfig& config, int threads) {
  std::vector<ShiftLog> out(corpus.size());
  parallel_for(corpus.size(), threads, [&](std::size_t i) { out[i] = replay(corpus[i], config); });
  return out;
}

std::array<Wape, kCalibrationMetrics> series_wapes(const MetricSeries& predicted, const MetricSeries& actual) {
  std::array<Wape, kCalibrationMetrics> w;
  for (int k = 0; k < kCalibrationMetrics; ++k) w[k] = wape(predicted.series[k], actual.series[k]);
  return w;
}

Scatter scatter_of(std::span<const ShiftLog> corpus, const std::vector<ShiftLog>& replays) {
  std::vector<ScatterPoint> pts;
  pts.reserve(corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i)
    pts.push_back({corpus[i].shift_id, output_rate(replays[i]), output_rate(corpus[i])});
  return r_squared(std::move(pts));
}

// Ordering key: stage-3 throughput first, the remaining six summed second.
// The actual series are fixed during a search, so numerators order exactly
// as the WAPEs do and stay defined when a denominator is zero.
struct Objective {
  double primary = 0.0, secondary = 0.0;
  double primary_wape = 0.0, secondary_wape = 0.0;

  bool better_than(const Objective& o) const {
    if (primary < o.primary - kTieTolerance * std::max(1.0, o.primary)) return true;
    if (primary > o.primary + kTieTolerance * std::max(1.0, o.primary)) return false;
    return secondary < o.secondary - kTieTolerance * std::max(1.0, o.secondary);
  }
};

Objective objective_of(const std::array<Wape, kCalibrationMetrics>& w) {
  Objective o;
  o.primary = w[2].numerator;
  o.primary_wape = w[2].value;
  for (int k = 0; k < kCalibrationMetrics; ++k) {
    if (k == 2) continue;
    o.secondary += w[k].numerator;
    o.secondary_wape += std::isfinite(w[k].value) ? w[k].value : 0.0;
  }
  return o;
}

}  // namespace

Scatter scatter_export(std::span<const ShiftLog> corpus, const SimConfig& config, int threads) {
  return scatter_of(corpus, replay_all(corpus, config, threads));
}

std::string scatter_csv(const Scatter& scatter) {
  std::ostringstream os;
  os.precision(17);
  os << "shift_id,predicted,actual\n";
  for (const auto& p : scatter.points) os << p.shift_id << ',' << p.predicted << ',' << p.actual << '\n';
  return os.str();
}

CalibrationReport calibration_report(std::span<const ShiftLog> corpus, const SimConfig& config, int threads) {
  if (corpus.empty()) throw UsageError("calibration: empty corpus");
  const std::vector<ShiftLog> replays = replay_all(corpus, config, threads);
  const MetricSeries actual = observed_series(corpus, config);
  CalibrationReport r;
  r.wapes = series_wapes(observed_series(replays, config), actual);
  r.scatter = scatter_of(corpus, replays);
  r.n_shifts = corpus.size();
  r.n_ticks = actual.series[0].size();
  return r;
}

json to_json(const CalibrationReport& report) {
  json metrics = json::array();
  for (int k = 0; k < kCalibrationMetrics; ++k) {
    const Wape& w = report.wapes[k];
    metrics.push_back({{"name", calibration_metric_name(k)},
                       {"wape", number_or_null(w.value)},
                       {"denominator", w.denominator},
                       {"small_denominator", w.small_denominator}});
  }
  return {{"metrics", metrics},
          {"r2", number_or_null(report.scatter.r2)},
          {"r2_defined", report.scatter.r2_defined},
          {"n_shifts", report.n_shifts},
          {"n_ticks", report.n_ticks},
          {"pooling", "per tick, summed over lines"}};
}

std::string format_calibration_table(const CalibrationReport& report) {
  std::ostringstream os;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-20s %10s\n", "metric", "WAPE");
  os << buf;
  for (int k = 0; k < kCalibrationMetrics; ++k) {
    const Wape& w = report.wapes[k];
    const std::string v = std::isfinite(w.value) ? percent(w.value).substr(1) : std::string("undefined");
    std::snprintf(buf, sizeof buf, "%-20s %10s%s\n", calibration_metric_name(k).c_str(), v.c_str(),
                  w.small_denominator ? "  (small denominator)" : "");
    os << buf;
  }
  if (report.scatter.r2_defined)
    std::snprintf(buf, sizeof buf, "R^2 %.6f over %zu shifts\n", report.scatter.r2, report.n_shifts);
  else
    std::snprintf(buf, sizeof buf, "R^2 undefined (constant actual output) over %zu shifts\n", report.n_shifts);
  os << buf;
  return os.str();
}

// ---------------------------------------------------------------------------
// Calibration search

std::vector<std::string> calibration_param_names() {
  return {"base_rate.1", "base_rate.2", "base_rate.3", "throttle_knee", "throttle_floor", "jam_coupling",
          "dispatch_rate"};
}

double get_param(const SimConfig& c, const std::string& name) {
  if (name == "base_rate.1") return c.base_rate[0];
  if (name == "base_rate.2") return c.base_rate[1];
  if (name == "base_rate.3") return c.base_rate[2];
  if (name == "throttle_knee") return c.throttle_knee;
  if (name == "throttle_floor") return c.throttle_floor;
  if (name == "jam_coupling") return c.jam_coupling;
  if (name == "dispatch_rate") return c.dispatch_rate;
  throw UsageError("unknown calibration parameter '" + name + "'");
}

void set_param(SimConfig& c, const std::string& name, double v) {
  if (name == "base_rate.1") c.base_rate[0] = v;
  else if (name == "base_rate.2") c.base_rate[1] = v;
  else if (name == "base_rate.3") c.base_rate[2] = v;
  else if (name == "throttle_knee") c.throttle_knee = v;
  else if (name == "throttle_floor") c.throttle_floor = v;
  else if (name == "jam_coupling") c.jam_coupling = v;
  else if (name == "dispatch_rate") c.dispatch_rate = v;
  else throw UsageError("unknown calibration parameter '" + name + "'");
}

SearchSpace default_search_space(const SimConfig& initial) {
  SearchSpace s;
  for (const auto& name : calibration_param_names()) {
    const double v = get_param(initial, name);
    s.params.push_back({name, {0.8 * v, 0.9 * v, v, 1.1 * v, 1.2 * v}});
  }
  return s;
}

SearchSpace search_space_from_json(const json& j, const SimConfig& initial) {
  if (!j.is_object()) throw UsageError("search space: expected an object");
  SearchSpace s;
  s.max_sweeps = j.value("max_sweeps", s.max_sweeps);
  if (!j.contains("params") || !j.at("params").is_array()) throw UsageError("search space: 'params' array required");
  for (const auto& p : j.at("params")) {
    if (!p.is_object() || !p.contains("name") || !p.at("name").is_string())
      throw UsageError("search space: every entry needs a 'name'");
    ParamGrid g{p.at("name").get<std::string>(), {}};
    const double base = get_param(initial, g.name);
    if (p.contains("values")) {
      g.values = p.at("values").get<std::vector<double>>();
    } else if (p.contains("relative")) {
      for (double r : p.at("relative").get<std::vector<double>>()) g.values.push_back(r * base);
    } else {
      throw UsageError("search space: '" + g.name + "' needs 'values' or 'relative'");
    }
    s.params.push_back(std::move(g));
  }
  return s;
}

json to_json(const SearchSpace& space) {
  json params = json::array();
  for (const auto& p : space.params) params.push_back({{"name", p.name}, {"values", p.values}});
  return {{"max_sweeps", space.max_sweeps}, {"params", params}};
}

CalibrationResult calibrate(std::span<const ShiftLog> corpus, const SimConfig& initial, const SearchSpace& space,
                            int threads) {
  if (space.params.empty()) throw UsageError("calibrate: empty search space");
  if (space.max_sweeps < 1) throw UsageError("calibrate: max_sweeps must be >= 1");
  if (corpus.empty()) throw UsageError("calibrate: empty corpus");
  for (const auto& p : space.params) {
    get_param(initial, p.name);
    if (p.values.empty()) throw UsageError("calibrate: empty grid for '" + p.name + "'");
  }
  if (auto errs = validate_config(initial); !errs.empty()) throw UsageError("config: " + errs.front());

  const MetricSeries actual = observed_series(corpus, initial);
  CalibrationResult result;
  auto evaluate_config = [&](const SimConfig& c) {
    if (auto errs = validate_config(c); !errs.empty())
      throw UsageError("calibrate: grid value makes the config invalid: " + errs.front());
    ++result.evaluations;
    return objective_of(series_wapes(observed_series(replay_all(corpus, c, threads), c), actual));
  };

  SimConfig current = initial;
  Objective current_obj = evaluate_config(current);
  for (int sweep = 0; sweep < space.max_sweeps; ++sweep) {
    result.sweeps = sweep + 1;
    // Best single-coordinate change over every grid value; earlier entries win ties.
    std::optional<std::tuple<std::string, double, Objective>> best;
    for (const auto& p : space.params) {
      const double held = get_param(current, p.name);
      for (double v : p.values) {
        if (v == held) continue;
        SimConfig trial = current;
        set_param(trial, p.name, v);
        const Objective o = evaluate_config(trial);
        if (!best || o.better_than(std::get<2>(*best))) best = {p.name, v, o};
      }
    }
    if (!best || !std::get<2>(*best).better_than(current_obj)) break;
    set_param(current, std::get<0>(*best), std::get<1>(*best));
    current_obj = std::get<2>(*best);
    result.trace.push_back({sweep, std::get<0>(*best), std::get<1>(*best), current_obj.primary_wape,
                            current_obj.secondary_wape});
  }
  result.config = current;
  result.report = calibration_report(corpus, current, threads);
  return result;
}

json to_json(const CalibrationResult& result) {
  json params = json::object();
  for (const auto& name : calibration_param_names()) params[name] = get_param(result.config, name);
  json trace = json::array();
  for (const auto& t : result.trace)
    trace.push_back({{"sweep", t.sweep},
                     {"param", t.param},
                     {"value", t.value},
                     {"stage3_wape", number_or_null(t.primary)},
                     {"other_wape_sum", number_or_null(t.secondary)}});
  return {{"parameters", params},
          {"config", to_json(result.config)},
          {"report", to_json(result.report)},
          {"trace", trace},
          {"sweeps", result.sweeps},
          {"evaluations", result.evaluations}};
}

}  // namespace sortsim

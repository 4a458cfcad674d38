#include "sortsim/pipeline.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "sortsim/eval.hpp"
#include "sortsim/sim.hpp"

namespace sortsim {

namespace fs = std::filesystem;

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::string& path, const std::string& content) {
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path + "'");
  out << content;
  if (!out) throw DataError("write failed for '" + path + "'");
}

json to_json(const PrefGenParams& p) {
  return {{"horizon", p.horizon},
          {"epsilon", p.epsilon},
          {"continuation", continuation_name(p.continuation)},
          {"n_perturbations", p.n_perturbations},
          {"seed", p.seed},
          {"iteration", p.iteration},
          {"source_id", p.source_id}};
}

PrefGenParams prefgen_params_from_json(const json& j) {
  if (!j.is_object()) throw DataError("prefgen params: expected a JSON object");
  PrefGenParams p;
  try {
    p.horizon = j.value("horizon", p.horizon);
    p.epsilon = j.value("epsilon", p.epsilon);
    if (j.contains("continuation")) {
      auto c = parse_continuation(j.at("continuation").get<std::string>());
      if (!c) throw UsageError("prefgen params: continuation must be no_reallocation or greedy_bottleneck");
      p.continuation = *c;
    }
    p.n_perturbations = j.value("n_perturbations", p.n_perturbations);
    p.seed = j.value("seed", p.seed);
    p.iteration = j.value("iteration", p.iteration);
    p.source_id = j.value("source_id", p.source_id);
  } catch (const json::exception& e) {
    throw DataError(std::string("prefgen params: ") + e.what());
  }
  if (auto errs = validate_prefgen_params(p); !errs.empty()) throw UsageError("prefgen params: " + errs.front());
  return p;
}

namespace {

// Reads a required or optional key with a uniform error type.
template <typename T>
T field(const json& req, const char* key, const T& fallback) {
  try {
    return req.contains(key) ? req.at(key).get<T>() : fallback;
  } catch (const json::exception& e) {
    throw UsageError(std::string("request: '") + key + "': " + e.what());
  }
}

std::string required_string(const json& req, const char* key) {
  if (!req.contains(key) || !req.at(key).is_string() || req.at(key).get<std::string>().empty())
    throw UsageError(std::string("request: '") + key + "' is required");
  return req.at(key).get<std::string>();
}

SimConfig sim_of(const json& req) {
  SimConfig c = req.contains("sim") ? config_from_json(req.at("sim")) : SimConfig::defaults();
  if (auto errs = validate_config(c); !errs.empty()) throw UsageError("sim config: " + errs.front());
  return c;
}

int threads_of(const json& req) {
  const int t = field(req, "threads", 1);
  if (t < 1) throw UsageError("request: threads must be >= 1");
  return t;
}

std::string out_dir_of(const json& req) {
  const std::string dir = required_string(req, "out_dir");
  fs::create_directories(dir);
  return dir;
}

std::string join(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

std::vector<ShiftLog> load_corpus(const json& req) {
  auto corpus = corpus_from_jsonl(read_text_file(required_string(req, "corpus_path")));
  if (corpus.empty()) throw DataError("corpus '" + req.at("corpus_path").get<std::string>() + "' holds no shift logs");
  return corpus;
}

json load_json_file(const std::string& path) {
  const std::string text = read_text_file(path);
  json j = json::parse(text, nullptr, false);
  if (j.is_discarded()) throw DataError("'" + path + "' is not valid JSON");
  return j;
}

}  // namespace

json run_generate(const json& req) {
  const SimConfig sim = sim_of(req);
  CorpusParams params = req.contains("corpus") ? corpus_params_from_json(req.at("corpus")) : CorpusParams{};
  params.seed = field(req, "seed", params.seed);
  const std::string dir = out_dir_of(req);
  const auto corpus = generate_corpus(sim, params, threads_of(req));
  const std::string path = join(dir, "corpus.jsonl");
  write_text_file(path, corpus_to_jsonl(corpus));
  double total = 0.0;
  std::size_t moves = 0;
  for (const auto& log : corpus) {
    total += log.total_reward();
    for (const auto& t : log.ticks) moves += t.action.moves.size();
  }
  const double n = static_cast<double>(corpus.size());
  return {{"command", "generate"},
          {"n_shifts", corpus.size()},
          {"mean_output", total / n},
          {"moves_per_shift", static_cast<double>(moves) / n},
          {"corpus", to_json(params)},
          {"sim_digest", config_digest(sim)},
          {"outputs", {path}},
          {"seeds", {{"corpus", params.seed}}}};
}

json run_train(const json& req) {
  const SimConfig sim = sim_of(req);
  const std::string method_s = required_string(req, "method");
  const auto method = parse_method(method_s);
  if (!method) throw UsageError("unknown method '" + method_s + "' (expected bc, bcft or ac)");
  TrainConfig cfg = req.contains("train") ? train_config_from_json(req.at("train")) : TrainConfig{};
  cfg.seed = field(req, "seed", cfg.seed);
  cfg.threads = threads_of(req);
  if (auto errs = validate_train_config(cfg); !errs.empty()) throw UsageError("train config: " + errs.front());
  const std::string dir = out_dir_of(req);
  const auto corpus = load_corpus(req);

  const TrainResult res = train(*method, corpus, sim, cfg);
  const json info = {{"method", method_name(*method)},
                     {"train_config", to_json(cfg)},
                     {"best_epoch", res.best_epoch},
                     {"stopped_epoch", res.stopped_epoch},
                     {"early_stopped", res.early_stopped},
                     {"n_train_shifts", res.n_train_shifts},
                     {"n_heldout_shifts", res.n_heldout_shifts},
                     {"skipped_samples", res.skipped_samples},
                     {"sim_digest", config_digest(sim)}};
  const std::string ckpt = join(dir, "checkpoint.json");
  const std::string metrics = join(dir, "metrics.csv");
  write_text_file(ckpt, checkpoint_to_json(res.policy, res.value ? &*res.value : nullptr, info).dump(2) + "\n");
  write_text_file(metrics, metrics_csv(res.metrics));
  json out = info;
  out["command"] = "train";
  out["outputs"] = {ckpt, metrics};
  out["seeds"] = {{"train", cfg.seed}};
  return out;
}

json run_evaluate(const json& req) {
  const SimConfig sim = sim_of(req);
  const std::string dir = out_dir_of(req);
  const auto corpus = load_corpus(req);
  EvalOptions opts;
  opts.threads = threads_of(req);
  opts.include_no_reallocation = field(req, "include_no_reallocation", true);
  if (req.contains("bootstrap")) {
    const json& b = req.at("bootstrap");
    opts.bootstrap.resamples = field(b, "resamples", opts.bootstrap.resamples);
    opts.bootstrap.confidence = field(b, "confidence", opts.bootstrap.confidence);
    opts.bootstrap.seed = field(b, "seed", opts.bootstrap.seed);
  }
  opts.bootstrap.seed = field(req, "seed", opts.bootstrap.seed);

  std::vector<NamedPolicy> policies;
  if (field(req, "include_greedy", true)) {
    policies.push_back({"greedy_bottleneck", [sim](const SystemState& s) { return greedy_bottleneck(s, sim).action; }});
  }
  json inputs = json::array();
  for (const auto& c : field(req, "checkpoints", json::array())) {
    std::string name, path;
    if (c.is_string()) {
      path = c.get<std::string>();
    } else if (c.is_object()) {
      path = required_string(c, "path");
      name = field(c, "name", std::string());
    } else {
      throw UsageError("request: checkpoints entries must be paths or {name, path}");
    }
    const json ck = load_json_file(path);
    const FactorizedPolicy policy = policy_from_checkpoint(ck);
    if (name.empty()) {
      name = ck.contains("train") && ck.at("train").contains("method") ? ck.at("train").at("method").get<std::string>()
                                                                        : fs::path(path).stem().string();
    }
    policies.push_back({name, [policy, sim](const SystemState& s) { return policy_decide(policy, s, sim).action; }});
    inputs.push_back({{"name", name}, {"path", path}});
  }

  const EvalReport report = evaluate(corpus, policies, sim, opts);
  const std::string rpath = join(dir, "eval_report.json");
  const std::string tpath = join(dir, "eval_table.txt");
  json rj = to_json(report);
  write_text_file(rpath, rj.dump(2) + "\n");
  const std::string table = format_eval_table(report);
  write_text_file(tpath, table);
  return {{"command", "evaluate"},
          {"report", rj},
          {"table", table},
          {"checkpoints", inputs},
          {"sim_digest", config_digest(sim)},
          {"outputs", {rpath, tpath}},
          {"seeds", {{"bootstrap", opts.bootstrap.seed}}}};
}

json run_prefgen(const json& req) {
  const SimConfig sim = sim_of(req);
  const std::string dir = out_dir_of(req);
  const auto corpus = load_corpus(req);
  PrefGenParams params = req.contains("params") ? prefgen_params_from_json(req.at("params")) : PrefGenParams{};
  params.seed = field(req, "seed", params.seed);
  const int rounds = field(req, "rounds", 1);
  const int stride = field(req, "state_stride", 10);
  const int max_states = field(req, "max_states", 200);
  const int n_samples = field(req, "n_samples", 2);
  if (stride < 1 || max_states < 1 || n_samples < 0) throw UsageError("request: state_stride, max_states >= 1, n_samples >= 0");
  const std::string source = field(req, "source", std::string("greedy"));

  std::vector<SystemState> states;
  for (const auto& log : corpus) {
    for (std::size_t t = 0; t < log.ticks.size() && static_cast<int>(states.size()) < max_states;
         t += static_cast<std::size_t>(stride))
      states.push_back(log.ticks[t].state);
  }

  ProposalSource src;
  if (source == "no_reallocation") {
    src = no_reallocation_source();
  } else if (source == "greedy") {
    src = greedy_source(sim);
  } else if (source == "policy") {
    src = policy_source(policy_from_checkpoint(load_json_file(required_string(req, "checkpoint"))), sim, n_samples);
  } else {
    throw UsageError("request: source must be no_reallocation, greedy or policy");
  }
  if (!req.contains("params") || !req.at("params").contains("source_id")) params.source_id = source;

  const auto results = iterate_preferences(states, [&](int) { return src; }, rounds, sim, params);
  json outputs = json::array(), per_round = json::array();
  for (std::size_t r = 0; r < results.size(); ++r) {
    const int iteration = params.iteration + static_cast<int>(r);
    const std::string path = join(dir, "preferences_r" + std::to_string(iteration) + ".jsonl");
    PrefGenParams round_params = params;
    round_params.iteration = iteration;
    if (!results[r].pairs.empty()) round_params.seed = results[r].pairs.front().provenance.seed;
    json events = json::array();
    for (const auto& e : results[r].events) events.push_back(to_json(e));
    const json header = {{"round", r},
                         {"iteration", iteration},
                         {"params", to_json(round_params)},
                         {"n_states", states.size()},
                         {"discarded", results[r].discarded},
                         {"sim_digest", config_digest(sim)}};
    write_text_file(path, preferences_to_jsonl(results[r].pairs, header));
    outputs.push_back(path);
    per_round.push_back({{"iteration", iteration},
                         {"pairs", results[r].pairs.size()},
                         {"discarded", results[r].discarded},
                         {"events", events}});
  }
  return {{"command", "prefgen"},
          {"n_states", states.size()},
          {"rounds", per_round},
          {"params", to_json(params)},
          {"outputs", outputs},
          {"seeds", {{"prefgen", params.seed}}}};
}

json run_calibrate(const json& req) {
  const SimConfig sim = sim_of(req);
  const std::string dir = out_dir_of(req);
  const auto corpus = load_corpus(req);
  const SearchSpace space =
      req.contains("search_space") ? search_space_from_json(req.at("search_space"), sim) : default_search_space(sim);
  const CalibrationResult res = calibrate(corpus, sim, space, threads_of(req));

  const std::string cal = join(dir, "calibration.json");
  const std::string cfg = join(dir, "calibrated_config.json");
  const std::string csv = join(dir, "scatter.csv");
  const std::string table = join(dir, "calibration_table.txt");
  json rj = to_json(res);
  rj["search_space"] = to_json(space);
  write_text_file(cal, rj.dump(2) + "\n");
  write_text_file(cfg, to_json(res.config).dump(2) + "\n");
  write_text_file(csv, scatter_csv(res.report.scatter));
  const std::string text = format_calibration_table(res.report);
  write_text_file(table, text);
  return {{"command", "calibrate"},
          {"result", rj},
          {"table", text},
          {"initial_digest", config_digest(sim)},
          {"calibrated_digest", config_digest(res.config)},
          {"outputs", {cal, cfg, csv, table}},
          {"seeds", json::object()}};
}

}  // namespace sortsim

// sortsim command-line front end. Talks to the library only through the C API.

#include <atomic>
#include <chrono>
#include <csignal>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "sortsim/sortsim.h"

namespace {

using json = nlohmann::json;
namespace fs = std::filesystem;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitData = 3;

struct CommonOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  int threads = 1;
  std::string out_dir;
};

// Failure carrying the process exit code.
struct Exit {
  int code;
  std::string message;
};

json load_config_file(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream in(path);
  if (!in) throw Exit{kExitData, "cannot read config file '" + path + "'"};
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw Exit{kExitData, "config file '" + path + "' is not a JSON object"};
  return j;
}

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

// Request skeleton shared by the pipeline commands.
json base_request(const CommonOptions& o, const json& file) {
  json req = json::object();
  if (file.contains("sim")) req["sim"] = file.at("sim");
  if (o.seed) req["seed"] = *o.seed;
  req["threads"] = o.threads;
  req["out_dir"] = o.out_dir;
  return req;
}

using PipelineFn = sortsim_status (*)(const char*, char**);

json call_pipeline(PipelineFn fn, const json& request) {
  char* out = nullptr;
  const sortsim_status st = fn(request.dump().c_str(), &out);
  if (st != SORTSIM_OK) throw Exit{static_cast<int>(st), sortsim_last_error()};
  json summary = json::parse(out);
  sortsim_string_free(out);
  return summary;
}

void write_manifest(const std::string& command, const CommonOptions& o, const json& request, const json& summary,
                    double seconds) {
  json manifest = {{"command", command},
                   {"tool_version", sortsim_version()},
                   {"config_path", o.config_path},
                   {"config_digest", summary.value("sim_digest", summary.value("initial_digest", std::string()))},
                   {"seeds", summary.value("seeds", json::object())},
                   {"threads", o.threads},
                   {"inputs", json::object()},
                   {"outputs", summary.value("outputs", json::array())},
                   {"request", request},
                   {"started_at", utc_now()},
                   {"wall_clock_seconds", seconds}};
  for (const char* key : {"corpus_path", "checkpoints", "checkpoint"})
    if (request.contains(key)) manifest["inputs"][key] = request.at(key);
  if (summary.contains("best_epoch")) {
    manifest["early_stopping"] = {{"best_epoch", summary.at("best_epoch")},
                                  {"stopped_epoch", summary.at("stopped_epoch")},
                                  {"early_stopped", summary.at("early_stopped")}};
  }
  const fs::path path = fs::path(o.out_dir) / "manifest.json";
  std::ofstream out(path);
  if (!out) throw Exit{kExitData, "cannot write '" + path.string() + "'"};
  out << manifest.dump(2) << "\n";
}

int run_command(const std::string& command, PipelineFn fn, const CommonOptions& o, const json& request,
                const std::string& print_key) {
  const auto t0 = std::chrono::steady_clock::now();
  const json summary = call_pipeline(fn, request);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_manifest(command, o, request, summary, seconds);
  if (!print_key.empty() && summary.contains(print_key))
    std::cout << summary.at(print_key).get<std::string>();
  else
    std::cout << summary.dump(2) << "\n";
  return kExitOk;
}

std::atomic<sortsim_server*> g_server{nullptr};

void on_signal(int) {
  if (sortsim_server* s = g_server.load()) sortsim_server_stop(s);
}

void add_common(CLI::App* app, CommonOptions& o, bool needs_out) {
  app->add_option("--config", o.config_path, "JSON run configuration file");
  app->add_option("--seed", o.seed, "Seed for every random choice of the command");
  app->add_option("--threads", o.threads, "Worker threads (1 = deterministic reference mode)")->check(CLI::PositiveNumber);
  if (needs_out) app->add_option("--out", o.out_dir, "Output directory")->required();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sortation floor simulator, reallocation learners and evaluation tools"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(sortsim_version()));

  CommonOptions common;

  auto* gen = app.add_subcommand("generate", "Generate a synthetic corpus of scripted-manager shifts");
  add_common(gen, common, true);
  int n_shifts = -1;
  gen->add_option("--n-shifts", n_shifts, "Number of shifts")->check(CLI::PositiveNumber);

  auto* tr = app.add_subcommand("train", "Train a reallocation policy (bc, bcft or ac)");
  add_common(tr, common, true);
  std::string method, corpus_path;
  tr->add_option("--method", method, "bc, bcft or ac")->required();
  tr->add_option("--corpus", corpus_path, "Corpus JSON-Lines file")->required();

  auto* ev = app.add_subcommand("evaluate", "Compare policies against the replayed corpus");
  add_common(ev, common, true);
  std::vector<std::string> checkpoints;
  bool no_greedy = false;
  ev->add_option("--corpus", corpus_path, "Evaluation corpus")->required();
  ev->add_option("--checkpoint", checkpoints, "Checkpoint path, optionally NAME=PATH (repeatable)");
  ev->add_flag("--no-greedy", no_greedy, "Leave out the greedy heuristic");

  auto* pg = app.add_subcommand("prefgen", "Generate rollout-labelled preference pairs");
  add_common(pg, common, true);
  std::string source = "greedy", checkpoint;
  int rounds = 1, max_states = -1;
  pg->add_option("--corpus", corpus_path, "Corpus providing the states")->required();
  pg->add_option("--source", source, "no_reallocation, greedy or policy");
  pg->add_option("--checkpoint", checkpoint, "Checkpoint for the policy source");
  pg->add_option("--rounds", rounds, "Number of dataset versions")->check(CLI::PositiveNumber);
  pg->add_option("--max-states", max_states, "States sampled from the corpus")->check(CLI::PositiveNumber);

  auto* cal = app.add_subcommand("calibrate", "Fit simulator parameters to a corpus");
  add_common(cal, common, true);
  cal->add_option("--corpus", corpus_path, "Observed corpus")->required();

  auto* sv = app.add_subcommand("serve", "Run the session HTTP service");
  add_common(sv, common, false);
  std::string host;
  int port = -1;
  sv->add_option("--host", host, "Bind address");
  sv->add_option("--port", port, "Port (overrides SORTSIM_PORT and the config file)")->check(CLI::Range(0, 65535));
  sv->add_option("--checkpoint", checkpoint, "Policy checkpoint for the first suggestion");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  try {
    const json file = load_config_file(common.config_path);
    json req = base_request(common, file);

    if (*gen) {
      req["corpus"] = file.value("corpus", json::object());
      if (n_shifts > 0) req["corpus"]["n_shifts"] = n_shifts;
      return run_command("generate", &sortsim_run_generate, common, req, "");
    }
    if (*tr) {
      req["method"] = method;
      req["corpus_path"] = corpus_path;
      if (file.contains("train")) req["train"] = file.at("train");
      return run_command("train", &sortsim_run_train, common, req, "");
    }
    if (*ev) {
      req["corpus_path"] = corpus_path;
      json cks = json::array();
      for (const auto& c : checkpoints) {
        const auto eq = c.find('=');
        if (eq == std::string::npos)
          cks.push_back(c);
        else
          cks.push_back({{"name", c.substr(0, eq)}, {"path", c.substr(eq + 1)}});
      }
      req["checkpoints"] = cks;
      req["include_greedy"] = !no_greedy;
      if (file.contains("bootstrap")) req["bootstrap"] = file.at("bootstrap");
      return run_command("evaluate", &sortsim_run_evaluate, common, req, "table");
    }
    if (*pg) {
      const json pf = file.value("prefgen", json::object());
      for (auto it = pf.begin(); it != pf.end(); ++it) req[it.key()] = it.value();
      req["corpus_path"] = corpus_path;
      if (pg->count("--source") || !req.contains("source")) req["source"] = source;
      if (!checkpoint.empty()) req["checkpoint"] = checkpoint;
      if (pg->count("--rounds") || !req.contains("rounds")) req["rounds"] = rounds;
      if (max_states > 0) req["max_states"] = max_states;
      return run_command("prefgen", &sortsim_run_prefgen, common, req, "");
    }
    if (*cal) {
      req["corpus_path"] = corpus_path;
      if (file.contains("search_space")) req["search_space"] = file.at("search_space");
      return run_command("calibrate", &sortsim_run_calibrate, common, req, "table");
    }
    if (*sv) {
      json service = file.value("service", json::object());
      if (file.contains("sim") && !service.contains("sim")) service["sim"] = file.at("sim");
      if (!checkpoint.empty()) service["checkpoint"] = checkpoint;
      sortsim_server* server = nullptr;
      if (sortsim_server_create(service.dump().c_str(), &server) != SORTSIM_OK)
        throw Exit{kExitUsage, sortsim_last_error()};
      int bound = 0;
      const sortsim_status st = sortsim_server_start(server, host.empty() ? nullptr : host.c_str(), port, &bound);
      if (st != SORTSIM_OK) {
        const std::string msg = sortsim_last_error();
        sortsim_server_destroy(server);
        throw Exit{static_cast<int>(st), msg};
      }
      g_server = server;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      std::cout << "listening on port " << bound << std::endl;
      sortsim_server_wait(server);
      g_server = nullptr;
      sortsim_server_destroy(server);
      return kExitOk;
    }
  } catch (const Exit& e) {
    std::cerr << "error: " << e.message << "\n";
    return e.code;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return kExitUsage;
}

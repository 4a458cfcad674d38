#pragma once

#include <string>

#include "sortsim/learn.hpp"
#include "sortsim/model.hpp"
#include "sortsim/prefgen.hpp"

namespace sortsim {

// JSON-in, JSON-out drivers behind the CLI and the C API. Each one writes its
// artifacts under request["out_dir"] and returns a summary whose "outputs"
// lists the written paths and whose "seeds" lists every seed used.
//
// Shared request keys: "sim" (config object, defaults when absent),
// "threads" (default 1), "seed" (overrides the command's own seed field),
// "out_dir" (required).

/// "corpus": {n_shifts, seed, scenario, manager}. Writes corpus.jsonl.
json run_generate(const json& request);

/// "method" (bc|bcft|ac), "corpus_path", "train" (TrainConfig fields).
/// Writes checkpoint.json and metrics.csv.
json run_train(const json& request);

/// "corpus_path", "checkpoints" ([path] or [{"name", "path"}]),
/// "include_greedy" (default true), "include_no_reallocation" (default true),
/// "bootstrap" {resamples, confidence, seed}. Writes eval_report.json and
/// eval_table.txt.
json run_evaluate(const json& request);

/// "corpus_path", "source" (no_reallocation|greedy|policy), "checkpoint"
/// (policy source), "n_samples", "rounds", "state_stride", "max_states",
/// "params" (PrefGenParams fields). Writes preferences_r<iteration>.jsonl.
json run_prefgen(const json& request);

/// "corpus_path", "search_space" (default grid when absent). Writes
/// calibration.json, calibrated_config.json, scatter.csv and
/// calibration_table.txt.
json run_calibrate(const json& request);

json to_json(const PrefGenParams& p);
PrefGenParams prefgen_params_from_json(const json& j);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& content);

}  // namespace sortsim

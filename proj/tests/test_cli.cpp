// Drives the installed command-line tool as a subprocess.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <unistd.h>

#include <json.hpp>

namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::string tool;
fs::path root;
int failures = 0;

void expect(bool ok, const std::string& what) {
  std::printf("%s %s\n", ok ? "ok  " : "FAIL", what.c_str());
  failures += !ok;
}

int run(const std::string& args) {
  const std::string cmd = "'" + tool + "' " + args + " > '" + (root / "stdout.txt").string() + "' 2> '" +
                          (root / "stderr.txt").string() + "'";
  const int st = std::system(cmd.c_str());
  return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    std::fprintf(stderr, "usage: %s <path to sortsim>\n", argv[0]);
    return 2;
  }
  tool = argv[1];
  root = fs::temp_directory_path() / ("sortsim-cli-" + std::to_string(::getpid()));
  fs::create_directories(root);
  {
    std::ofstream cfg(root / "run.json");
    cfg << R"({"sim": {"n_lines": 2, "episode_length": 12},
               "corpus": {"scenario": {"n_workers": 14}},
               "train": {"epochs": 3, "finetune_epochs": 2},
               "bootstrap": {"resamples": 200}})";
  }
  const std::string cfg = " --config " + q(root / "run.json");

  expect(run("--help") == 0, "--help exits 0");
  expect(run("") == 2, "no subcommand exits 2");
  expect(run("generate") == 2, "missing --out exits 2");
  expect(run("frobnicate") == 2, "unknown subcommand exits 2");

  expect(run("generate --n-shifts 6 --seed 9 --out " + q(root / "a") + cfg) == 0, "generate run a");
  expect(run("generate --n-shifts 6 --seed 9 --out " + q(root / "b") + cfg) == 0, "generate run b");
  const std::string a = slurp(root / "a" / "corpus.jsonl");
  expect(!a.empty() && a == slurp(root / "b" / "corpus.jsonl"), "same seed gives a byte-identical corpus");
  expect(run("generate --n-shifts 6 --seed 10 --out " + q(root / "c") + cfg) == 0 &&
             slurp(root / "c" / "corpus.jsonl") != a,
         "another seed gives another corpus");

  const json manifest = json::parse(slurp(root / "a" / "manifest.json"));
  expect(manifest.at("command") == "generate", "manifest names the command");
  expect(manifest.contains("seeds") && !manifest.at("seeds").empty(), "manifest lists seeds");
  expect(manifest.contains("tool_version") && manifest.contains("wall_clock_seconds"), "manifest has version and timing");
  expect(!manifest.at("outputs").empty(), "manifest lists outputs");

  const fs::path corpus = root / "a" / "corpus.jsonl";
  expect(run("train --method ac --corpus " + q(corpus) + " --out " + q(root / "ac") + cfg) == 0, "train ac");
  expect(fs::exists(root / "ac" / "checkpoint.json") && fs::exists(root / "ac" / "metrics.csv"),
         "train writes checkpoint and metrics");
  expect(json::parse(slurp(root / "ac" / "manifest.json")).contains("early_stopping"), "train manifest has stopping");
  expect(run("train --method ppo --corpus " + q(corpus) + " --out " + q(root / "x") + cfg) == 2, "unknown method exits 2");
  expect(run("train --method bc --corpus " + q(root / "missing.jsonl") + " --out " + q(root / "x")) == 3,
         "missing corpus exits 3");
  {
    std::ofstream bad(root / "bad.jsonl");
    bad << "{broken\n";
  }
  expect(run("train --method bc --corpus " + q(root / "bad.jsonl") + " --out " + q(root / "x")) == 3,
         "corrupt corpus exits 3");

  expect(run("evaluate --corpus " + q(root / "c" / "corpus.jsonl") + " --checkpoint ac=" +
             (root / "ac" / "checkpoint.json").string() + " --out " + q(root / "eval") + cfg) == 0,
         "evaluate");
  const std::string table = slurp(root / "stdout.txt");
  expect(table.find("replay") != std::string::npos && table.find("ac") != std::string::npos, "evaluate prints the table");
  expect(fs::exists(root / "eval" / "eval_report.json"), "evaluate writes the report");

  expect(run("prefgen --corpus " + q(corpus) + " --source greedy --max-states 5 --out " + q(root / "pref") + cfg) == 0,
         "prefgen");
  expect(fs::exists(root / "pref" / "preferences_r0.jsonl"), "prefgen writes a dataset");

  expect(run("calibrate --corpus " + q(corpus) + " --out " + q(root / "cal") + cfg) == 0, "calibrate");
  expect(fs::exists(root / "cal" / "calibrated_config.json") && fs::exists(root / "cal" / "scatter.csv"),
         "calibrate writes config and scatter");

  expect(run("serve --port 70000") == 2, "out-of-range port exits 2");

  fs::remove_all(root);
  std::printf("%d failure(s)\n", failures);
  return failures == 0 ? 0 : 1;
}

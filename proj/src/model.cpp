#include "sortsim/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "sortsim/errors.hpp"

namespace sortsim {

SimConfig SimConfig::defaults(int n_lines) {
  SimConfig c;
  c.n_lines = n_lines;
  c.buffer_capacity.assign(static_cast<std::size_t>(n_lines), BufferArray{120.0, 60.0, 40.0, 200.0});
  c.arrival_rate.assign(static_cast<std::size_t>(n_lines), 16.0);
  return c;
}

std::vector<std::string> validate_config(const SimConfig& c) {
  std::vector<std::string> errs;
  auto need = [&](bool ok, const std::string& msg) {
    if (!ok) errs.push_back(msg);
  };
  need(c.n_lines >= 1, "n_lines: must be >= 1");
  need(static_cast<int>(c.buffer_capacity.size()) == c.n_lines,
       "buffer_capacity: needs one entry per line");
  need(static_cast<int>(c.arrival_rate.size()) == c.n_lines, "arrival_rate: needs one entry per line");
  for (int s = 0; s < kStages; ++s) {
    need(c.slot_capacity[s] >= 1, "slot_capacity: every stage needs >= 1 slot");
    need(c.base_rate[s] >= 0.0 && std::isfinite(c.base_rate[s]), "base_rate: must be finite and >= 0");
  }
  for (const auto& caps : c.buffer_capacity)
    for (double v : caps) need(v >= 0.0 && std::isfinite(v), "buffer_capacity: must be finite and >= 0");
  for (double v : c.arrival_rate) need(v >= 0.0 && std::isfinite(v), "arrival_rate: must be finite and >= 0");
  need(c.arrival_amplitude >= 0.0 && c.arrival_amplitude <= 1.0, "arrival_amplitude: must be in [0,1]");
  need(c.arrival_period >= 1, "arrival_period: must be >= 1");
  need(c.throttle_knee >= 0.0 && c.throttle_knee < 1.0, "throttle_knee: must be in [0,1)");
  need(c.throttle_floor >= 0.0 && c.throttle_floor <= 1.0, "throttle_floor: must be in [0,1]");
  need(c.jam_coupling >= 0.0 && c.jam_coupling <= 1.0, "jam_coupling: must be in [0,1]");
  need(c.jam_duration >= 0, "jam_duration: must be >= 0");
  need(c.jam_hazard_scale >= 0.0 && c.jam_hazard_scale <= 1.0, "jam_hazard_scale: must be in [0,1]");
  need(c.dispatch_rate >= 0.0 && std::isfinite(c.dispatch_rate), "dispatch_rate: must be finite and >= 0");
  need(c.cooldown >= 0, "cooldown: must be >= 0");
  need(c.tick_minutes >= 1, "tick_minutes: must be >= 1");
  need(c.episode_length >= 1, "episode_length: must be >= 1");
  std::array<int, kBuffers> labels = c.buffer_state_labels;
  std::sort(labels.begin(), labels.end());
  need(labels == std::array<int, kBuffers>{1, 2, 3, 4}, "buffer_state_labels: must be a permutation of 1..4");
  return errs;
}

int SystemState::assigned(int line, int stage) const {
  return static_cast<int>(std::count(assignment.begin(), assignment.end(), Position{line, stage}));
}

bool SystemState::line_active(int line) const {
  return std::any_of(assignment.begin(), assignment.end(),
                     [line](const Position& p) { return p.line == line; });
}

SystemState empty_state(const SimConfig& config, int n_workers) {
  SystemState s;
  const auto n = static_cast<std::size_t>(config.n_lines);
  s.buffers.assign(n, BufferArray{});
  s.external_backlog.assign(n, 0.0);
  s.assignment.assign(static_cast<std::size_t>(n_workers), Position{});
  s.cooldown_remaining.assign(static_cast<std::size_t>(n_workers), 0);
  s.jam_remaining.assign(n, 0);
  s.last_tick_throughput.assign(n, StageArray{});
  return s;
}

std::string worker_id(int index) { return "w" + std::to_string(index + 1); }

std::optional<int> parse_worker_id(const std::string& id) {
  if (id.size() < 2 || id.size() > 10 || id[0] != 'w' || id[1] == '0') return std::nullopt;
  int v = 0;
  for (std::size_t i = 1; i < id.size(); ++i) {
    if (id[i] < '0' || id[i] > '9') return std::nullopt;
    v = v * 10 + (id[i] - '0');
  }
  return v - 1;
}

Action Action::canonical() const {
  Action out = *this;
  std::stable_sort(out.moves.begin(), out.moves.end(), [](const Move& a, const Move& b) {
    auto ia = parse_worker_id(a.worker_id), ib = parse_worker_id(b.worker_id);
    if (ia && ib) return *ia < *ib;
    if (ia != ib) return ia.has_value();
    return a.worker_id < b.worker_id;
  });
  return out;
}

double ShiftLog::total_reward() const {
  double total = 0.0;
  for (const auto& t : ticks) total += t.reward;
  return total;
}

// ---------------------------------------------------------------------------
// JSON

namespace {

const char* jam_mode_name(JamMode m) {
  return m == JamMode::kStochastic ? "stochastic" : "deterministic";
}

template <typename T>
void read_opt(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

json to_json(const SimConfig& c) {
  json j;
  j["schema_version"] = kConfigSchemaVersion;
  j["n_lines"] = c.n_lines;
  j["n_stages"] = kStages;
  j["slot_capacity"] = c.slot_capacity;
  j["base_rate"] = c.base_rate;
  j["buffer_capacity"] = c.buffer_capacity;
  j["arrival_rate"] = c.arrival_rate;
  j["arrival_amplitude"] = c.arrival_amplitude;
  j["arrival_period"] = c.arrival_period;
  j["throttle_knee"] = c.throttle_knee;
  j["throttle_floor"] = c.throttle_floor;
  j["jam_coupling"] = c.jam_coupling;
  j["jam_mode"] = jam_mode_name(c.jam_mode);
  j["jam_duration"] = c.jam_duration;
  j["jam_hazard_scale"] = c.jam_hazard_scale;
  j["dispatch_rate"] = c.dispatch_rate;
  j["cooldown"] = c.cooldown;
  j["tick_minutes"] = c.tick_minutes;
  j["episode_length"] = c.episode_length;
  j["buffer_state_labels"] = c.buffer_state_labels;
  return j;
}

SimConfig config_from_json(const json& j) {
  if (!j.is_object()) throw DataError("config: expected a JSON object");
  try {
    if (j.contains("schema_version") && j.at("schema_version").get<int>() != kConfigSchemaVersion)
      throw DataError("config: unsupported schema_version");
    if (j.contains("n_stages") && j.at("n_stages").get<int>() != kStages)
      throw DataError("config: n_stages must be 3");
    const int n_lines = j.value("n_lines", 4);
    if (n_lines < 1 || n_lines > 64) throw DataError("config: n_lines must be in [1, 64]");
    SimConfig c = SimConfig::defaults(n_lines);
    read_opt(j, "slot_capacity", c.slot_capacity);
    read_opt(j, "base_rate", c.base_rate);
    if (j.contains("buffer_capacity")) {
      const auto& bc = j.at("buffer_capacity");
      if (bc.is_array() && bc.size() == kBuffers && bc[0].is_number()) {
        c.buffer_capacity.assign(static_cast<std::size_t>(n_lines), bc.get<BufferArray>());
      } else {
        c.buffer_capacity = bc.get<std::vector<BufferArray>>();
      }
    }
    if (j.contains("arrival_rate")) {
      const auto& ar = j.at("arrival_rate");
      if (ar.is_number())
        c.arrival_rate.assign(static_cast<std::size_t>(n_lines), ar.get<double>());
      else
        c.arrival_rate = ar.get<std::vector<double>>();
    }
    read_opt(j, "arrival_amplitude", c.arrival_amplitude);
    read_opt(j, "arrival_period", c.arrival_period);
    read_opt(j, "throttle_knee", c.throttle_knee);
    read_opt(j, "throttle_floor", c.throttle_floor);
    read_opt(j, "jam_coupling", c.jam_coupling);
    if (j.contains("jam_mode")) {
      const auto m = j.at("jam_mode").get<std::string>();
      if (m == "deterministic")
        c.jam_mode = JamMode::kDeterministic;
      else if (m == "stochastic")
        c.jam_mode = JamMode::kStochastic;
      else
        throw DataError("config: jam_mode must be 'deterministic' or 'stochastic'");
    }
    read_opt(j, "jam_duration", c.jam_duration);
    read_opt(j, "jam_hazard_scale", c.jam_hazard_scale);
    read_opt(j, "dispatch_rate", c.dispatch_rate);
    read_opt(j, "cooldown", c.cooldown);
    read_opt(j, "tick_minutes", c.tick_minutes);
    read_opt(j, "episode_length", c.episode_length);
    read_opt(j, "buffer_state_labels", c.buffer_state_labels);
    return c;
  } catch (const json::exception& e) {
    throw DataError(std::string("config: ") + e.what());
  }
}

json to_json(const SystemState& s) {
  json j;
  j["tick"] = s.tick;
  j["buffers"] = s.buffers;
  j["external_backlog"] = s.external_backlog;
  json assign = json::array();
  for (std::size_t w = 0; w < s.assignment.size(); ++w) {
    const auto& p = s.assignment[w];
    assign.push_back({{"worker_id", worker_id(static_cast<int>(w))},
                      {"line", p.line + 1},
                      {"stage", p.stage + 1},
                      {"cooldown", s.cooldown_remaining[w]}});
  }
  j["assignment"] = std::move(assign);
  j["jam_remaining"] = s.jam_remaining;
  j["cumulative_output"] = s.cumulative_output;
  j["cumulative_arrivals"] = s.cumulative_arrivals;
  j["last_tick_throughput"] = s.last_tick_throughput;
  return j;
}

SystemState state_from_json(const json& j) {
  try {
    SystemState s;
    s.tick = j.at("tick").get<int>();
    s.buffers = j.at("buffers").get<std::vector<BufferArray>>();
    s.external_backlog = j.at("external_backlog").get<std::vector<double>>();
    const auto& assign = j.at("assignment");
    s.assignment.resize(assign.size());
    s.cooldown_remaining.resize(assign.size());
    for (const auto& a : assign) {
      auto idx = parse_worker_id(a.at("worker_id").get<std::string>());
      if (!idx || *idx >= static_cast<int>(assign.size()))
        throw DataError("state: worker ids must be w1..wN");
      s.assignment[*idx] = Position{a.at("line").get<int>() - 1, a.at("stage").get<int>() - 1};
      s.cooldown_remaining[*idx] = a.value("cooldown", 0);
    }
    s.jam_remaining = j.at("jam_remaining").get<std::vector<int>>();
    s.cumulative_output = j.at("cumulative_output").get<double>();
    s.cumulative_arrivals = j.at("cumulative_arrivals").get<double>();
    s.last_tick_throughput = j.at("last_tick_throughput").get<std::vector<StageArray>>();
    const std::size_t n = s.buffers.size();
    if (s.external_backlog.size() != n || s.jam_remaining.size() != n || s.last_tick_throughput.size() != n)
      throw DataError("state: per-line arrays disagree in length");
    return s;
  } catch (const json::exception& e) {
    throw DataError(std::string("state: ") + e.what());
  }
}

json to_json(const Move& m) {
  return {{"worker_id", m.worker_id}, {"to_line", m.to_line + 1}, {"to_stage", m.to_stage + 1}};
}

json to_json(const Action& a) {
  json arr = json::array();
  for (const auto& m : a.moves) arr.push_back(to_json(m));
  return arr;
}

Action action_from_json(const json& j) {
  if (!j.is_array()) throw DataError("action: expected a JSON array");
  Action a;
  for (const auto& e : j) {
    if (!e.is_object() || !e.contains("worker_id") || !e.at("worker_id").is_string() ||
        !e.contains("to_line") || !e.at("to_line").is_number_integer() || !e.contains("to_stage") ||
        !e.at("to_stage").is_number_integer())
      throw DataError("action: entries need worker_id (string), to_line (int), to_stage (int)");
    a.moves.push_back(Move{e.at("worker_id").get<std::string>(), e.at("to_line").get<int>() - 1,
                           e.at("to_stage").get<int>() - 1});
  }
  return a;
}

json to_json(const Event& e) {
  json j{{"kind", e.kind}};
  if (e.line >= 0) j["line"] = e.line + 1;
  if (!e.detail.empty()) j["detail"] = e.detail;
  if (e.amount != 0.0) j["amount"] = e.amount;
  return j;
}

Event event_from_json(const json& j) {
  Event e;
  e.kind = j.at("kind").get<std::string>();
  e.line = j.value("line", 0) - 1;
  e.detail = j.value("detail", std::string{});
  e.amount = j.value("amount", 0.0);
  return e;
}

// ---------------------------------------------------------------------------
// Digests

namespace {

struct Fnv1a {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  }
  void u64(std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    bytes(b, 8);
  }
  void i64(long long v) { u64(static_cast<std::uint64_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v == 0.0 ? 0.0 : v)); }
  std::string hex() const {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
  }
};

}  // namespace

std::string state_digest(const SystemState& s) {
  Fnv1a f;
  f.i64(s.tick);
  f.i64(s.n_lines());
  for (const auto& b : s.buffers)
    for (double v : b) f.f64(v);
  for (double v : s.external_backlog) f.f64(v);
  f.i64(s.n_workers());
  for (std::size_t w = 0; w < s.assignment.size(); ++w) {
    f.i64(s.assignment[w].line);
    f.i64(s.assignment[w].stage);
    f.i64(s.cooldown_remaining[w]);
  }
  for (int v : s.jam_remaining) f.i64(v);
  f.f64(s.cumulative_output);
  f.f64(s.cumulative_arrivals);
  for (const auto& t : s.last_tick_throughput)
    for (double v : t) f.f64(v);
  return f.hex();
}

std::string config_digest(const SimConfig& c) {
  Fnv1a f;
  const std::string text = to_json(c).dump();
  f.bytes(text.data(), text.size());
  return f.hex();
}

// ---------------------------------------------------------------------------
// ShiftLog JSON-Lines

std::string shift_log_to_jsonl(const ShiftLog& log) {
  std::ostringstream out;
  json header{{"type", "header"},
              {"schema_version", kLogSchemaVersion},
              {"shift_id", log.shift_id},
              {"seed", log.seed},
              {"initial_state", to_json(log.initial)},
              {"final_state", to_json(log.final_state)},
              {"meta", log.meta}};
  out << header.dump() << '\n';
  for (const auto& t : log.ticks) {
    json events = json::array();
    for (const auto& e : t.events) events.push_back(to_json(e));
    json rec{{"tick", t.tick},
             {"state_digest", state_digest(t.state)},
             {"action", to_json(t.action)},
             {"reward", t.reward},
             {"stage_flows", t.stage_flows},
             {"buffer_levels", t.buffer_levels},
             {"events", std::move(events)},
             {"state", to_json(t.state)}};
    out << rec.dump() << '\n';
  }
  return out.str();
}

ShiftLog shift_log_from_jsonl(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  ShiftLog log;
  bool have_header = false;
  std::size_t lineno = 0;
  try {
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      json j = json::parse(line);
      if (!have_header) {
        if (j.value("type", "") != "header") throw DataError("shift log: first record must be the header");
        if (j.value("schema_version", 0) != kLogSchemaVersion)
          throw DataError("shift log: unsupported schema_version");
        log.shift_id = j.at("shift_id").get<std::string>();
        log.seed = j.at("seed").get<std::uint64_t>();
        log.initial = state_from_json(j.at("initial_state"));
        log.final_state = state_from_json(j.at("final_state"));
        log.meta = j.value("meta", json::object());
        have_header = true;
        continue;
      }
      TickRecord t;
      t.tick = j.at("tick").get<int>();
      t.state = state_from_json(j.at("state"));
      if (state_digest(t.state) != j.at("state_digest").get<std::string>())
        throw DataError("shift log: state_digest mismatch at line " + std::to_string(lineno));
      t.action = action_from_json(j.at("action"));
      t.reward = j.at("reward").get<double>();
      t.stage_flows = j.at("stage_flows").get<std::vector<StageArray>>();
      t.buffer_levels = j.at("buffer_levels").get<std::vector<BufferArray>>();
      for (const auto& e : j.value("events", json::array())) t.events.push_back(event_from_json(e));
      log.ticks.push_back(std::move(t));
    }
  } catch (const json::exception& e) {
    throw DataError("shift log line " + std::to_string(lineno) + ": " + e.what());
  }
  if (!have_header) throw DataError("shift log: missing header record");
  return log;
}

std::string corpus_to_jsonl(const std::vector<ShiftLog>& logs) {
  std::string out;
  for (const auto& log : logs) out += shift_log_to_jsonl(log);
  return out;
}

std::vector<ShiftLog> corpus_from_jsonl(const std::string& text) {
  std::vector<ShiftLog> logs;
  std::istringstream in(text);
  std::string line, chunk;
  // Tick records never carry a "type" key, so this marks header lines only.
  while (std::getline(in, line)) {
    if (line.find("\"type\":\"header\"") != std::string::npos && !chunk.empty()) {
      logs.push_back(shift_log_from_jsonl(chunk));
      chunk.clear();
    }
    if (!line.empty()) chunk += line + '\n';
  }
  if (!chunk.empty()) logs.push_back(shift_log_from_jsonl(chunk));
  return logs;
}

}  // namespace sortsim

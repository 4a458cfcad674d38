#include "sortsim/prefgen.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "sortsim/errors.hpp"
#include "sortsim/sim.hpp"

namespace sortsim {

const char* const kTaskInstruction =
    "You assign workers on a sortation floor with several parallel lines of three sequential stages. "
    "The description lists each line's staffing per stage, buffer fill levels and last-tick output; "
    "worker ids and positions are in state_json. Reply with a JSON array of reassignments, each "
    "{\"worker_id\": \"w<k>\", \"to_line\": <line>, \"to_stage\": <stage>} using 1-based numbers, "
    "to maximise total output over the shift. A moved worker is idle for the next tick. "
    "Reply [] to keep the current staffing.";

std::string format_decimal1(double value) {
  const long long tenths = std::llround(std::nearbyint(value * 10.0));
  const long long mag = tenths < 0 ? -tenths : tenths;
  char buf[48];
  std::snprintf(buf, sizeof buf, "%s%lld.%lld", tenths < 0 ? "-" : "", mag / 10, mag % 10);
  return buf;
}

std::string serialize_state(const SystemState& state, const SimConfig& config) {
  std::string out = "SYSTEM t=" + std::to_string(state.tick) + "/" + std::to_string(config.episode_length) + "\n";
  for (int l = 0; l < config.n_lines; ++l) {
    out += "LINE " + std::to_string(l + 1) + (state.line_active(l) ? " ACTIVE" : " CLOSED") + " staff ";
    for (int s = 0; s < kStages; ++s) out += (s ? "/" : "") + std::to_string(state.assigned(l, s));
    out += " fill ";
    for (int b = 0; b < kBuffers; ++b) {
      const double cap = config.buffer_capacity[l][b];
      out += (b ? "/" : "") + format_decimal1(cap > 0.0 ? 100.0 * state.buffers[l][b] / cap : 0.0) + "%";
    }
    out += " tput " + format_decimal1(state.last_tick_throughput[l][kStages - 1]) + "/tick\n";
  }
  int on_floor = 0, cooling = 0;
  for (int w = 0; w < state.n_workers(); ++w) {
    if (state.assignment[w].on_floor()) ++on_floor;
    if (state.cooldown_remaining[w] > 0) ++cooling;
  }
  double backlog = 0.0;
  for (double b : state.external_backlog) backlog += b;
  out += "SUMMARY workers " + std::to_string(on_floor) + "/" + std::to_string(state.n_workers()) + " cooling " +
         std::to_string(cooling) + " backlog " + format_decimal1(backlog) + " output " +
         format_decimal1(state.cumulative_output) + "\n";
  return out;
}

// ---------------------------------------------------------------------------

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

// End (exclusive) of the bracket span opening at `open`, or npos. String
// literals are skipped so brackets inside them do not count.
std::size_t balanced_end(std::string_view text, std::size_t open) {
  int depth = 0;
  bool in_string = false;
  for (std::size_t i = open; i < text.size(); ++i) {
    const char c = text[i];
    if (in_string) {
      if (c == '\\') ++i;
      else if (c == '"') in_string = false;
      continue;
    }
    if (c == '"') in_string = true;
    else if (c == '[') ++depth;
    else if (c == ']' && --depth == 0) return i + 1;
  }
  return std::string_view::npos;
}

std::optional<json> parse_array(std::string_view s) {
  json j = json::parse(s.begin(), s.end(), nullptr, false);
  if (j.is_discarded() || !j.is_array()) return std::nullopt;
  return j;
}

ParsedAction convert(const json& arr, std::size_t offset) {
  ParsedAction out;
  Action a;
  for (std::size_t k = 0; k < arr.size(); ++k) {
    const json& e = arr[k];
    auto fail = [&](const std::string& why) {
      out.error = ParseError{"invalid_entry", offset, "entry " + std::to_string(k) + ": " + why};
      return out;
    };
    if (!e.is_object()) return fail("not an object");
    if (!e.contains("worker_id") || !e["worker_id"].is_string()) return fail("worker_id must be a string");
    for (const char* key : {"to_line", "to_stage"}) {
      if (!e.contains(key) || !e[key].is_number_integer()) return fail(std::string(key) + " must be an integer");
      if (e[key].get<long long>() < 0) return fail(std::string(key) + " must be >= 0");
    }
    const long long line = e["to_line"].get<long long>(), stage = e["to_stage"].get<long long>();
    if ((line == 0) != (stage == 0)) return fail("0 is only valid as 0/0 (off floor)");
    if (line > 1'000'000 || stage > 1'000'000) return fail("index out of range");
    a.moves.push_back(Move{e["worker_id"].get<std::string>(), static_cast<int>(line) - 1, static_cast<int>(stage) - 1});
  }
  out.action = std::move(a);
  return out;
}

}  // namespace

ParsedAction parse_action(std::string_view text) {
  for (std::size_t pos = text.find("```"); pos != std::string_view::npos;) {
    const std::size_t nl = text.find('\n', pos + 3);
    if (nl == std::string_view::npos) break;
    const std::size_t close = text.find("```", nl + 1);
    if (close == std::string_view::npos) break;
    const std::string_view tag = trim(text.substr(pos + 3, nl - pos - 3));
    if (tag.empty() || tag == "json" || tag == "JSON") {
      const std::string_view body = text.substr(nl + 1, close - nl - 1);
      if (auto arr = parse_array(trim(body))) {
        const std::size_t lead = body.find_first_not_of(" \t\r\n");
        return convert(*arr, nl + 1 + (lead == std::string_view::npos ? 0 : lead));
      }
    }
    pos = text.find("```", close + 3);
  }
  for (std::size_t open = text.find('['); open != std::string_view::npos; open = text.find('[', open + 1)) {
    const std::size_t end = balanced_end(text, open);
    if (end == std::string_view::npos) continue;
    if (auto arr = parse_array(text.substr(open, end - open))) return convert(*arr, open);
  }
  ParsedAction out;
  out.error = ParseError{"no_json_array", 0, "no JSON array found"};
  return out;
}

std::string render_action(const Action& action) { return to_json(action.canonical()).dump(); }

// ---------------------------------------------------------------------------

std::string continuation_name(Continuation c) {
  return c == Continuation::kGreedy ? "greedy_bottleneck" : "no_reallocation";
}

std::optional<Continuation> parse_continuation(const std::string& name) {
  if (name == "no_reallocation") return Continuation::kNoReallocation;
  if (name == "greedy_bottleneck" || name == "greedy") return Continuation::kGreedy;
  return std::nullopt;
}

json to_json(const PreferencePair& p) {
  return {{"state_index", p.state_index},
          {"pair_index", p.pair_index},
          {"state_text", p.state_text},
          {"state_json", p.state_json},
          {"chosen", to_json(p.chosen)},
          {"rejected", to_json(p.rejected)},
          {"score_chosen", p.score_chosen},
          {"score_rejected", p.score_rejected},
          {"horizon", p.horizon},
          {"continuation", p.continuation},
          {"margin", p.margin},
          {"provenance", {{"source", p.provenance.source}, {"iteration", p.provenance.iteration}, {"seed", p.provenance.seed}}},
          {"rationale", p.rationale}};
}

PreferencePair preference_from_json(const json& j) {
  try {
    PreferencePair p;
    p.state_index = j.at("state_index").get<std::size_t>();
    p.pair_index = j.at("pair_index").get<std::size_t>();
    p.state_text = j.at("state_text").get<std::string>();
    p.state_json = j.at("state_json");
    p.chosen = action_from_json(j.at("chosen"));
    p.rejected = action_from_json(j.at("rejected"));
    p.score_chosen = j.at("score_chosen").get<double>();
    p.score_rejected = j.at("score_rejected").get<double>();
    p.horizon = j.at("horizon").get<int>();
    p.continuation = j.at("continuation").get<std::string>();
    p.margin = j.at("margin").get<double>();
    const json& prov = j.at("provenance");
    p.provenance = Provenance{prov.at("source").get<std::string>(), prov.at("iteration").get<int>(),
                              prov.at("seed").get<std::uint64_t>()};
    p.rationale = j.value("rationale", "");
    return p;
  } catch (const json::exception& e) {
    throw DataError(std::string("preference pair: ") + e.what());
  }
}

double rollout_score(const SystemState& state, const Action& action, const SimConfig& config, int horizon,
                     Continuation continuation) {
  SimConfig det = config;
  det.jam_mode = JamMode::kDeterministic;
  SystemState s = state;
  double total = 0.0;
  for (int k = 0; k < horizon; ++k) {
    Action a;
    if (k == 0) a = action;
    else if (continuation == Continuation::kGreedy) a = greedy_bottleneck(s, det).action;
    StepResult r = step(s, a, det);
    total += r.reward;
    s = std::move(r.next_state);
  }
  return total;
}

std::vector<std::string> validate_prefgen_params(const PrefGenParams& p) {
  std::vector<std::string> errs;
  if (p.horizon < 1) errs.push_back("horizon: must be >= 1");
  if (!(p.epsilon >= 0.0)) errs.push_back("epsilon: must be >= 0");
  if (p.n_perturbations < 0) errs.push_back("n_perturbations: must be >= 0");
  return errs;
}

std::optional<Label> label_pair(const Action& a, double score_a, const Action& b, double score_b, double epsilon) {
  const double diff = score_a - score_b;
  if (std::abs(diff) < epsilon) return std::nullopt;
  if (diff != 0.0) return Label{diff > 0.0, std::abs(diff)};
  return Label{render_action(a) <= render_action(b), 0.0};
}

std::vector<Action> candidate_set(const SystemState& state, const SimConfig& config, const ProposalSource& source,
                                  const PrefGenParams& params, std::uint64_t state_seed, std::vector<Event>* events) {
  std::vector<Action> out{Action{}};
  auto add = [&](const Action& raw, const char* origin) {
    const Action a = raw.canonical();
    if (auto v = validate_action(state, a, config); !v.empty()) {
      if (events) events->push_back({"candidate_dropped", -1, std::string(origin) + ": " + describe(v), 0.0});
      return;
    }
    if (std::find(out.begin(), out.end(), a) == out.end()) out.push_back(a);
  };
  if (source)
    for (const auto& a : source(state, derive_seed(state_seed, 1))) add(a, "proposal");
  Rng rng(derive_seed(state_seed, 2));
  for (int k = 0; k < params.n_perturbations; ++k) add(random_valid_move(state, config, rng), "perturbation");
  return out;
}

PrefGenResult generate_preferences(const std::vector<SystemState>& states, const ProposalSource& source,
                                   const SimConfig& config, const PrefGenParams& params) {
  if (auto errs = validate_prefgen_params(params); !errs.empty()) throw UsageError("prefgen: " + errs.front());
  PrefGenResult res;
  const std::string cont = continuation_name(params.continuation);
  for (std::size_t i = 0; i < states.size(); ++i) {
    const SystemState& s = states[i];
    const std::uint64_t state_seed = derive_seed(params.seed, i);
    const auto cands = candidate_set(s, config, source, params, state_seed, &res.events);
    if (cands.size() < 2) {
      res.events.push_back({"insufficient_candidates", -1, "state " + std::to_string(i), 0.0});
      continue;
    }
    std::vector<double> score(cands.size());
    for (std::size_t k = 0; k < cands.size(); ++k)
      score[k] = rollout_score(s, cands[k], config, params.horizon, params.continuation);
    const std::string text = serialize_state(s, config);
    const json sj = to_json(s);
    std::size_t pair_index = 0;
    for (std::size_t a = 0; a < cands.size(); ++a) {
      for (std::size_t b = a + 1; b < cands.size(); ++b, ++pair_index) {
        const auto label = label_pair(cands[a], score[a], cands[b], score[b], params.epsilon);
        if (!label) {
          ++res.discarded;
          continue;
        }
        const std::size_t c = label->first_chosen ? a : b, r = label->first_chosen ? b : a;
        PreferencePair p;
        p.state_index = i;
        p.pair_index = pair_index;
        p.state_text = text;
        p.state_json = sj;
        p.chosen = cands[c];
        p.rejected = cands[r];
        p.score_chosen = score[c];
        p.score_rejected = score[r];
        p.horizon = params.horizon;
        p.continuation = cont;
        p.margin = score[c] - score[r];
        p.provenance = Provenance{params.source_id, params.iteration, params.seed};
        res.pairs.push_back(std::move(p));
      }
    }
  }
  return res;
}

std::vector<PrefGenResult> iterate_preferences(const std::vector<SystemState>& states,
                                               const std::function<ProposalSource(int)>& source_for_round,
                                               int rounds, const SimConfig& config, const PrefGenParams& params) {
  if (rounds < 1) throw UsageError("prefgen: rounds must be >= 1");
  std::vector<PrefGenResult> out;
  for (int r = 0; r < rounds; ++r) {
    PrefGenParams p = params;
    p.iteration = params.iteration + r;
    if (r > 0) p.seed = derive_seed(params.seed, 0x70000ULL + static_cast<std::uint64_t>(r));
    out.push_back(generate_preferences(states, source_for_round(r), config, p));
  }
  return out;
}

std::string preferences_to_jsonl(const std::vector<PreferencePair>& pairs, const json& header_extra) {
  json header = {{"type", "header"},
                 {"schema_version", 1},
                 {"prompt_version", kPromptVersion},
                 {"task_instruction", kTaskInstruction}};
  for (auto it = header_extra.begin(); it != header_extra.end(); ++it) header[it.key()] = it.value();
  std::string out = header.dump() + "\n";
  for (const auto& p : pairs) out += to_json(p).dump() + "\n";
  return out;
}

std::vector<PreferencePair> preferences_from_jsonl(const std::string& text, json* header) {
  std::vector<PreferencePair> out;
  std::istringstream in(text);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (trim(line).empty()) continue;
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded()) throw DataError("preferences: line " + std::to_string(n) + " is not JSON");
    if (j.value("type", "") == "header") {
      if (header) *header = j;
      continue;
    }
    out.push_back(preference_from_json(j));
  }
  return out;
}

ProposalSource no_reallocation_source() {
  return [](const SystemState&, std::uint64_t) { return std::vector<Action>{Action{}}; };
}

ProposalSource greedy_source(const SimConfig& config, const GreedyParams& params) {
  return [config, params](const SystemState& s, std::uint64_t) {
    return std::vector<Action>{greedy_bottleneck(s, config, params).action};
  };
}

ProposalSource policy_source(const FactorizedPolicy& policy, const SimConfig& config, int n_samples) {
  return [policy, config, n_samples](const SystemState& s, std::uint64_t seed) {
    const PositionFeatures f = extract_features(s, config);
    std::vector<Action> out{decode_action(policy, f).action};
    Rng rng(seed);
    for (int k = 0; k < n_samples; ++k) out.push_back(decode_action(policy, f, DecodeMode::kSample, &rng).action);
    return out;
  };
}

}  // namespace sortsim

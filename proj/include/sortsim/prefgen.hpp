#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "sortsim/agents.hpp"
#include "sortsim/learn.hpp"
#include "sortsim/model.hpp"

namespace sortsim {

// ---------------------------------------------------------------------------
// Canonical state text
//
//   SYSTEM t=<tick>/<T>
//   LINE <i> <ACTIVE|CLOSED> staff <s1>/<s2>/<s3> fill <b_in>%/<b12>%/<b23>%/<b_out>% tput <units>/tick
//   SUMMARY workers <on floor>/<total> cooling <n> backlog <units> output <units>
//
// Lines are 1-based, numbers use one decimal with round-half-even, every line
// ends with LF. tput is the line's stage-3 output in the previous tick.

std::string serialize_state(const SystemState& state, const SimConfig& config);

/// One decimal: value * 10 rounded half-to-even, "-0.0" printed as "0.0".
std::string format_decimal1(double value);

/// Fixed instruction shipped with every prompt; versioned in dataset headers.
extern const char* const kTaskInstruction;
inline constexpr int kPromptVersion = 1;

// ---------------------------------------------------------------------------
// Reply parsing

struct ParseError {
  std::string code;  // no_json_array, invalid_entry
  std::size_t position = 0;  // byte offset into the input text
  std::string reason;
};

struct ParsedAction {
  std::optional<Action> action;
  std::optional<ParseError> error;

  bool ok() const { return action.has_value(); }
};

/// First JSON array in the text: the contents of the first ```json (or bare
/// ```) fence holding an array, otherwise the first balanced [...] span that
/// parses. Entries must be {"worker_id": string, "to_line": int, "to_stage":
/// int}, 1-based, with 0/0 meaning off floor. Worker existence is checked by
/// validate_action, not here.
ParsedAction parse_action(std::string_view text);

/// Reply-schema JSON for an action (compact, canonical order).
std::string render_action(const Action& action);

// ---------------------------------------------------------------------------
// Preference pairs

enum class Continuation { kNoReallocation, kGreedy };

std::string continuation_name(Continuation c);
std::optional<Continuation> parse_continuation(const std::string& name);

struct Provenance {
  std::string source;  // proposal source id, or "human"
  int iteration = 0;
  std::uint64_t seed = 0;
};

struct PreferencePair {
  std::size_t state_index = 0;
  std::size_t pair_index = 0;
  std::string state_text;
  json state_json;
  Action chosen, rejected;
  double score_chosen = 0.0, score_rejected = 0.0;
  int horizon = 0;
  std::string continuation;
  double margin = 0.0;
  Provenance provenance;
  std::string rationale;  // free text from a human chooser, otherwise empty
};

json to_json(const PreferencePair& p);
PreferencePair preference_from_json(const json& j);

/// Cumulative reward of applying `action` and then `continuation` for the
/// remaining horizon - 1 ticks. Jams are always deterministic here.
double rollout_score(const SystemState& state, const Action& action, const SimConfig& config, int horizon,
                     Continuation continuation);

/// Candidate proposals for one state. The seed is derived per state.
using ProposalSource = std::function<std::vector<Action>(const SystemState&, std::uint64_t seed)>;

struct PrefGenParams {
  int horizon = 6;
  double epsilon = 0.5;
  Continuation continuation = Continuation::kNoReallocation;
  int n_perturbations = 2;  // random single moves added to every candidate set
  std::uint64_t seed = 1;
  int iteration = 0;
  std::string source_id = "policy";
};

std::vector<std::string> validate_prefgen_params(const PrefGenParams& p);

struct PrefGenResult {
  std::vector<PreferencePair> pairs;  // sorted by (state_index, pair_index)
  std::vector<Event> events;          // dropped candidates and similar
  std::size_t discarded = 0;          // pairs under the margin
};

/// Labels one candidate pair; nullopt when |score difference| < epsilon.
/// The result does not depend on the order of a and b.
/// Exact ties (possible only with epsilon = 0) go to the action whose
/// rendered reply sorts first.
struct Label {
  bool first_chosen = true;
  double margin = 0.0;
};
std::optional<Label> label_pair(const Action& a, double score_a, const Action& b, double score_b, double epsilon);

/// Candidate set for one state: the empty action, then the source's
/// proposals, then n_perturbations random valid single moves; duplicates and
/// invalid actions removed (the latter reported as events).
std::vector<Action> candidate_set(const SystemState& state, const SimConfig& config, const ProposalSource& source,
                                  const PrefGenParams& params, std::uint64_t state_seed, std::vector<Event>* events);

PrefGenResult generate_preferences(const std::vector<SystemState>& states, const ProposalSource& source,
                                   const SimConfig& config, const PrefGenParams& params);

/// Rounds share states and rollout parameters; source_for_round(r) supplies
/// the (possibly updated) proposal source for round r (0-based). Round 0 uses
/// params.seed, round r > 0 uses derive_seed(params.seed, 0x70000 + r).
std::vector<PrefGenResult> iterate_preferences(const std::vector<SystemState>& states,
                                               const std::function<ProposalSource(int)>& source_for_round,
                                               int rounds, const SimConfig& config, const PrefGenParams& params);

/// Dataset JSON-Lines: a header record carrying the task instruction and the
/// generation parameters, then one pair per line.
std::string preferences_to_jsonl(const std::vector<PreferencePair>& pairs, const json& header_extra = json::object());
std::vector<PreferencePair> preferences_from_jsonl(const std::string& text, json* header = nullptr);

// Built-in proposal sources.
ProposalSource no_reallocation_source();
ProposalSource greedy_source(const SimConfig& config, const GreedyParams& params = {});
/// n_samples sampled decodes of a trained policy plus its greedy decode.
ProposalSource policy_source(const FactorizedPolicy& policy, const SimConfig& config, int n_samples = 2);

}  // namespace sortsim

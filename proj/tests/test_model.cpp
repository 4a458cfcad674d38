#include <doctest.h>

#include "sortsim/eval.hpp"
#include "sortsim/model.hpp"
#include "support.hpp"

using namespace sortsim;
using namespace testing;

TEST_SUITE("model") {

TEST_CASE("default config is valid and matches the documented defaults") {
  const SimConfig c = SimConfig::defaults();
  CHECK(validate_config(c).empty());
  CHECK(c.n_lines == 4);
  CHECK(c.slot_capacity == std::array<int, 3>{4, 6, 2});
  CHECK(c.base_rate == StageArray{6.0, 4.0, 12.0});
  CHECK(c.buffer_capacity[2] == BufferArray{120.0, 60.0, 40.0, 200.0});
  CHECK(c.throttle_knee == 0.7);
  CHECK(c.throttle_floor == 0.2);
  CHECK(c.jam_coupling == 0.15);
  CHECK(c.dispatch_rate == 30.0);
  CHECK(c.cooldown == 1);
  CHECK(c.tick_minutes == 5);
  CHECK(c.episode_length == 50);
}

TEST_CASE("validate_config names the offending field") {
  auto first = [](SimConfig c) {
    const auto e = validate_config(c);
    return e.empty() ? std::string() : e.front().substr(0, e.front().find(':'));
  };
  SimConfig c = SimConfig::defaults();
  c.throttle_knee = 1.0;
  CHECK(first(c) == "throttle_knee");
  c = SimConfig::defaults();
  c.throttle_floor = -0.1;
  CHECK(first(c) == "throttle_floor");
  c = SimConfig::defaults();
  c.slot_capacity[1] = 0;
  CHECK(first(c) == "slot_capacity");
  c = SimConfig::defaults();
  c.arrival_rate.pop_back();
  CHECK(first(c) == "arrival_rate");
  c = SimConfig::defaults();
  c.buffer_state_labels = {1, 1, 2, 4};
  CHECK(first(c) == "buffer_state_labels");
  c = SimConfig::defaults();
  c.base_rate[0] = -1.0;
  CHECK(first(c) == "base_rate");
}

TEST_CASE("config JSON round trip and rejection of bad documents") {
  Rng rng(1);
  for (int k = 0; k < 50; ++k) {
    const SimConfig c = random_config(rng);
    const SimConfig back = config_from_json(json::parse(to_json(c).dump()));
    CHECK(config_digest(back) == config_digest(c));
    CHECK(to_json(back) == to_json(c));
  }
  json j = to_json(SimConfig::defaults());
  CHECK(j.at("schema_version") == kConfigSchemaVersion);
  j["schema_version"] = 99;
  CHECK_THROWS_AS(config_from_json(j), DataError);
  j = to_json(SimConfig::defaults());
  j["jam_mode"] = "sometimes";
  CHECK_THROWS_AS(config_from_json(j), DataError);
  CHECK_THROWS_AS(config_from_json(json::array()), DataError);
}

TEST_CASE("state JSON round trip preserves the digest") {
  Rng rng(2);
  for (int k = 0; k < 50; ++k) {
    const SimConfig c = random_config(rng);
    const SystemState s = random_state(c, rng);
    const SystemState back = state_from_json(json::parse(to_json(s).dump()));
    CHECK(back == s);
    CHECK(state_digest(back) == state_digest(s));
  }
}

TEST_CASE("digests are 16 hex digits and sensitive to every field") {
  const SimConfig c = SimConfig::defaults();
  const SystemState s = make_initial_state(c, ScenarioParams{}, 5);
  const std::string d = state_digest(s);
  CHECK(d.size() == 16);
  CHECK(d.find_first_not_of("0123456789abcdef") == std::string::npos);
  SystemState t = s;
  t.buffers[1][2] += 1e-9;
  CHECK(state_digest(t) != d);
  t = s;
  t.cooldown_remaining[0] = 1;
  CHECK(state_digest(t) != d);
  t = s;
  t.tick = 1;
  CHECK(state_digest(t) != d);
  SimConfig c2 = c;
  c2.jam_coupling = 0.16;
  CHECK(config_digest(c2) != config_digest(c));
}

TEST_CASE("actions use 1-based wire numbers and 0/0 for off floor") {
  const Action a{{{"w3", 1, 0}, {"w1", -1, -1}}};
  const json j = to_json(a);
  CHECK(j.dump() == R"([{"to_line":2,"to_stage":1,"worker_id":"w3"},{"to_line":0,"to_stage":0,"worker_id":"w1"}])");
  CHECK(action_from_json(j) == a);
  CHECK(a.canonical().moves.front().worker_id == "w1");
  CHECK_THROWS_AS(action_from_json(json::object()), DataError);
  CHECK_THROWS_AS(action_from_json(json::parse(R"([{"worker_id":3,"to_line":1,"to_stage":1}])")), DataError);
}

TEST_CASE("worker ids") {
  CHECK(worker_id(0) == "w1");
  CHECK(parse_worker_id("w12") == 11);
  CHECK_FALSE(parse_worker_id("w0"));
  CHECK_FALSE(parse_worker_id("x1"));
  CHECK_FALSE(parse_worker_id("w"));
  CHECK_FALSE(parse_worker_id("w1a"));
}

TEST_CASE("shift log and corpus JSON-Lines round trip") {
  SimConfig c = SimConfig::defaults(2);
  c.episode_length = 12;
  c.jam_mode = JamMode::kStochastic;
  CorpusParams p;
  p.n_shifts = 3;
  const auto corpus = generate_corpus(c, p);
  const std::string text = corpus_to_jsonl(corpus);
  const auto back = corpus_from_jsonl(text);
  REQUIRE(back.size() == 3);
  CHECK(corpus_to_jsonl(back) == text);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(back[i].shift_id == corpus[i].shift_id);
    CHECK(back[i].seed == corpus[i].seed);
    CHECK(back[i].initial == corpus[i].initial);
    CHECK(back[i].final_state == corpus[i].final_state);
    CHECK(back[i].ticks.size() == 12);
    CHECK(back[i].total_reward() == corpus[i].total_reward());
  }
  const auto single = shift_log_from_jsonl(shift_log_to_jsonl(corpus[0]));
  CHECK(shift_log_to_jsonl(single) == shift_log_to_jsonl(corpus[0]));
}

TEST_CASE("shift log reader rejects corrupt records") {
  SimConfig c = SimConfig::defaults(1);
  c.episode_length = 3;
  const ShiftLog log = run_episode(make_initial_state(c, ScenarioParams{}, 1),
                                   [](const SystemState&) { return Action{}; }, c, 1);
  std::string text = shift_log_to_jsonl(log);
  CHECK_THROWS_AS(shift_log_from_jsonl(""), DataError);
  CHECK_THROWS_AS(shift_log_from_jsonl(text.substr(text.find('\n') + 1)), DataError);
  const auto pos = text.find("\"state_digest\":\"") + 16;
  text[pos] = text[pos] == '0' ? '1' : '0';
  CHECK_THROWS_AS(shift_log_from_jsonl(text), DataError);
  CHECK_THROWS_AS(shift_log_from_jsonl("{not json\n"), DataError);
}

}  // TEST_SUITE

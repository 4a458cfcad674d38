#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "sortsim/sim.hpp"
#include "support.hpp"

using namespace sortsim;
using namespace testing;

namespace {

// One line, three stage-1 workers, nothing else staffed.
SimConfig one_line() {
  SimConfig c = SimConfig::defaults(1);
  c.arrival_rate = {0.0};
  return c;
}

SystemState staffed(const SimConfig& c, const std::vector<Position>& where) {
  SystemState s = empty_state(c, static_cast<int>(where.size()));
  s.assignment = where;
  return s;
}

}  // namespace

TEST_SUITE("sim") {

TEST_CASE("throttle is piecewise linear between knee and floor") {
  const SimConfig c = SimConfig::defaults();
  CHECK(throttle(0.0, c) == 1.0);
  CHECK(throttle(0.7, c) == 1.0);
  CHECK(throttle(1.0, c) == doctest::Approx(0.2).epsilon(1e-15));
  // 1 - (0.15 / 0.3) * 0.8
  CHECK(throttle(0.85, c) == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(throttle(-3.0, c) == 1.0);
  CHECK(throttle(7.0, c) == throttle(1.0, c));
  double prev = 1.0;
  for (int i = 0; i <= 1000; ++i) {
    const double g = throttle(i / 1000.0, c);
    CHECK(g <= prev);
    CHECK(g >= c.throttle_floor - 1e-15);
    prev = g;
  }
}

TEST_CASE("validate_action reports each violation kind") {
  SimConfig c = SimConfig::defaults(2);
  c.slot_capacity = {1, 2, 1};
  SystemState s = staffed(c, {{0, 0}, {0, 1}, {1, 0}, {-1, -1}});
  CHECK(validate_action(s, Action{}, c).empty());

  auto kinds = [&](const Action& a) {
    std::vector<std::string> k;
    for (const auto& v : validate_action(s, a, c)) k.push_back(v.kind);
    return k;
  };
  CHECK(kinds(Action{{{"w9", 0, 1}}}) == std::vector<std::string>{"unknown_worker"});
  CHECK(kinds(Action{{{"bob", 0, 1}}}) == std::vector<std::string>{"unknown_worker"});
  CHECK(kinds(Action{{{"w2", 0, 2}, {"w2", 1, 2}}}) == std::vector<std::string>{"duplicate_worker"});
  CHECK(kinds(Action{{{"w1", 5, 0}}}) == std::vector<std::string>{"invalid_destination"});
  CHECK(kinds(Action{{{"w1", 0, 0}}}) == std::vector<std::string>{"self_move"});
  CHECK(kinds(Action{{{"w4", 1, 0}}}) == std::vector<std::string>{"capacity"});
  // Swapping two workers between full cells is fine.
  CHECK(validate_action(s, Action{{{"w1", 1, 0}, {"w3", 0, 0}}}, c).empty());
  CHECK(validate_action(s, Action{{{"w1", -1, -1}}}, c).empty());
}

TEST_CASE("stage-1 flow of three workers with a quiet neighbourhood") {
  SimConfig c = one_line();
  SystemState s = staffed(c, {{0, 0}, {0, 0}, {0, 0}});
  s.buffers[0] = {100.0, 0.2 * 60.0, 0.0, 0.0};
  const StepResult r = step(s, Action{}, c);
  CHECK(r.per_stage_flow[0][0] == doctest::Approx(18.0).epsilon(1e-15));
  CHECK(r.next_state.buffers[0][0] == doctest::Approx(82.0));
  CHECK(r.reward == 0.0);
}

TEST_CASE("no workers: only arrivals and dispatch move units") {
  SimConfig c = SimConfig::defaults(2);
  SystemState s = staffed(c, {{-1, -1}});
  s.buffers[0] = {10.0, 20.0, 30.0, 50.0};
  s.buffers[1] = {1.0, 2.0, 3.0, 4.0};
  const StepResult r = step(s, Action{}, c);
  CHECK(r.reward == 0.0);
  for (int l = 0; l < 2; ++l) {
    CHECK(r.next_state.buffers[l][1] == s.buffers[l][1]);
    CHECK(r.next_state.buffers[l][2] == s.buffers[l][2]);
    CHECK(r.next_state.buffers[l][0] == doctest::Approx(s.buffers[l][0] + oracle_arrivals(c, l, 0)));
    CHECK(r.next_state.buffers[l][3] == std::max(0.0, s.buffers[l][3] - c.dispatch_rate));
  }
}

TEST_CASE("full downstream buffer blocks the stage") {
  SimConfig c = one_line();
  SystemState s = staffed(c, {{0, 1}, {0, 1}, {0, 1}});
  s.buffers[0] = {0.0, 50.0, c.buffer_capacity[0][2], 0.0};
  CHECK(step(s, Action{}, c).per_stage_flow[0][1] == 0.0);
}

TEST_CASE("deterministic jam coupling applies to stage 1 next to an active line") {
  SimConfig c = SimConfig::defaults(2);
  c.arrival_rate = {0.0, 0.0};
  SystemState s = staffed(c, {{0, 0}, {1, 2}});
  s.buffers[0] = {100.0, 0.0, 0.0, 0.0};
  CHECK(step(s, Action{}, c).per_stage_flow[0][0] == doctest::Approx(6.0 * (1.0 - 0.15)));
  s.assignment[1] = Position{-1, -1};
  CHECK(step(s, Action{}, c).per_stage_flow[0][0] == doctest::Approx(6.0));
}

TEST_CASE("a moved worker is idle for the cooldown, then productive") {
  SimConfig c = one_line();
  c.cooldown = 2;
  SystemState s = staffed(c, {{0, 0}});
  s.buffers[0] = {0.0, 100.0, 0.0, 0.0};
  s.buffers[0][1] = 40.0;
  StepResult r = step(s, Action{{{"w1", 0, 1}}}, c);
  CHECK(r.per_stage_flow[0][1] == 0.0);
  r = step(r.next_state, Action{}, c);
  CHECK(r.per_stage_flow[0][1] == 0.0);
  r = step(r.next_state, Action{}, c);
  CHECK(r.per_stage_flow[0][1] == doctest::Approx(4.0));
}

TEST_CASE("flow is linear in workers when unconstrained") {
  SimConfig c = one_line();
  c.buffer_capacity[0] = {1e6, 1e6, 1e6, 1e6};
  for (int st = 0; st < kStages; ++st) {
    SystemState s = empty_state(c, 0);
    s.buffers[0] = {1e5, 1e5, 1e5, 0.0};
    for (int n = 0; n <= c.slot_capacity[st]; ++n)
      CHECK(stage_flow(s, c, 0, st, n) == doctest::Approx(n * c.base_rate[st]).epsilon(1e-14));
  }
}

TEST_CASE("raising downstream fill never raises a stage's flow") {
  Rng rng(11);
  for (int trial = 0; trial < 500; ++trial) {
    const SimConfig c = random_config(rng);
    const SystemState s = random_state(c, rng, 5);
    const int l = uniform_int(rng, 0, c.n_lines - 1), st = uniform_int(rng, 0, kStages - 1);
    const int n = uniform_int(rng, 0, c.slot_capacity[st]);
    double prev = stage_flow(s, c, l, st, n);
    SystemState t = s;
    for (int k = 1; k <= 10; ++k) {
      t.buffers[l][st + 1] = c.buffer_capacity[l][st + 1] * k / 10.0;
      if (t.buffers[l][st + 1] < s.buffers[l][st + 1]) continue;
      const double f = stage_flow(t, c, l, st, n);
      CHECK(f <= prev + 1e-12);
      prev = f;
    }
  }
}

TEST_CASE("conservation and capacity safety over random configs") {
  Rng rng(2024);
  double worst = 0.0;
  int steps = 0;
  for (int cfg = 0; cfg < 25; ++cfg) {
    const SimConfig c = random_config(rng);
    REQUIRE(validate_config(c).empty());
    SystemState s = make_initial_state(c, random_scenario(rng, c), rng.next());
    double arrived = stock_in_system(s);
    for (int k = 0; k < 60; ++k, ++steps) {
      for (int l = 0; l < c.n_lines; ++l) arrived += oracle_arrivals(c, l, s.tick);
      s = step(s, random_valid_action(s, c, rng), c, rng.next()).next_state;
      const double rel = std::abs(arrived - stock_in_system(s)) / std::max(1.0, arrived);
      worst = std::max(worst, rel);
      CHECK(std::abs(s.cumulative_arrivals - arrived) <= 1e-9 * std::max(1.0, arrived));
      for (int l = 0; l < c.n_lines; ++l)
        for (int b = 0; b < kBuffers; ++b) {
          CHECK(s.buffers[l][b] >= 0.0);
          CHECK(s.buffers[l][b] <= c.buffer_capacity[l][b] * (1.0 + 1e-12) + 1e-12);
        }
      for (int l = 0; l < c.n_lines; ++l)
        for (int st = 0; st < kStages; ++st) CHECK(s.assigned(l, st) <= c.slot_capacity[st]);
    }
  }
  CHECK(steps >= 1000);
  CHECK(worst <= 1e-9);
}

TEST_CASE("reward equals stage-3 flow summed over lines") {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const SimConfig c = random_config(rng);
    const SystemState s = random_state(c, rng);
    const StepResult r = step(s, random_valid_action(s, c, rng), c, rng.next());
    double sum = 0.0;
    for (const auto& f : r.per_stage_flow) sum += f[kStages - 1];
    CHECK(r.reward == doctest::Approx(sum).epsilon(1e-14));
    CHECK(r.reward >= 0.0);
  }
}

TEST_CASE("step is deterministic and leaves the input unchanged on an invalid action") {
  Rng rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    const SimConfig c = random_config(rng);
    const SystemState s = random_state(c, rng);
    const Action a = random_valid_action(s, c, rng);
    const std::uint64_t seed = rng.next();
    const StepResult r1 = step(s, a, c, seed), r2 = step(s, a, c, seed);
    CHECK(r1.next_state == r2.next_state);
    CHECK(r1.reward == r2.reward);
  }
  SimConfig c = SimConfig::defaults(1);
  const SystemState s = staffed(c, {{0, 0}});
  const SystemState before = s;
  CHECK_THROWS_AS(step(s, Action{{{"w7", 0, 1}}}, c), InvalidActionError);
  CHECK(s == before);
  c.jam_mode = JamMode::kStochastic;
  CHECK_THROWS_AS(step(s, Action{}, c), UsageError);
}

TEST_CASE("run_episode records every tick and rejects invalid actions to no-ops") {
  const SimConfig c = SimConfig::defaults();
  const SystemState init = make_initial_state(c, ScenarioParams{}, 3);
  const ShiftLog log = run_episode(init, [](const SystemState&) { return Action{}; }, c, 9);
  REQUIRE(log.ticks.size() == 50);
  for (int t = 0; t < 50; ++t) {
    CHECK(log.ticks[t].tick == t);
    CHECK(log.ticks[t].action.empty());
  }
  CHECK(shift_log_to_jsonl(log) == shift_log_to_jsonl(run_episode(init, [](const SystemState&) { return Action{}; }, c, 9)));

  const Policy bad = [](const SystemState&) { return Action{{{"w999", 0, 0}}}; };
  const ShiftLog rejected = run_episode(init, bad, c, 9);
  CHECK(rejected.ticks[0].action.empty());
  CHECK(rejected.ticks[0].events.front().kind == "action_rejected");
  CHECK(rejected.total_reward() == log.total_reward());
  CHECK_THROWS_AS(run_episode(init, bad, c, 9, InvalidActionMode::kAbort), InvalidActionError);
}

TEST_CASE("stochastic episodes depend only on the seed") {
  SimConfig c = SimConfig::defaults();
  c.jam_mode = JamMode::kStochastic;
  c.jam_hazard_scale = 1.0;
  const SystemState init = make_initial_state(c, ScenarioParams{}, 4);
  const Policy hold = [](const SystemState&) { return Action{}; };
  const ShiftLog a = run_episode(init, hold, c, 77), b = run_episode(init, hold, c, 77);
  CHECK(shift_log_to_jsonl(a) == shift_log_to_jsonl(b));
  bool jammed = false;
  for (const auto& t : a.ticks)
    for (const auto& e : t.events) jammed |= e.kind == "jam_onset";
  CHECK(jammed);
}

TEST_CASE("initial states respect slot capacities and count stock as arrivals") {
  Rng rng(31);
  for (int trial = 0; trial < 200; ++trial) {
    const SimConfig c = random_config(rng);
    const SystemState s = make_initial_state(c, random_scenario(rng, c), rng.next());
    for (int l = 0; l < c.n_lines; ++l)
      for (int st = 0; st < kStages; ++st) CHECK(s.assigned(l, st) <= c.slot_capacity[st]);
    CHECK(s.cumulative_arrivals == doctest::Approx(stock_in_system(s)).epsilon(1e-14));
  }
}

}  // TEST_SUITE

#include <doctest.h>

#include <atomic>
#include <cstdlib>
#include <thread>

#include "sortsim/eval.hpp"
#include "sortsim/service.hpp"
#include "support.hpp"

// After Eigen: resolv.h, pulled in here, defines a _res macro.
#include <httplib.h>

using namespace sortsim;
using namespace testing;

namespace {

ServiceConfig small_service() {
  ServiceConfig c;
  c.sim = SimConfig::defaults(2);
  c.sim.episode_length = 12;
  c.scenario.n_workers = 14;
  return c;
}

int status_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const ApiError& e) {
    return e.status();
  }
  return 200;
}

}  // namespace

TEST_SUITE("service") {

TEST_CASE("session lifecycle through the handlers") {
  Service svc(small_service());
  const json created = svc.create_session({{"seed", 5}});
  const std::string id = created.at("session_id");
  CHECK(created.at("tick") == 0);
  CHECK(created.at("done") == false);
  CHECK(created.at("state_text").get<std::string>().rfind("SYSTEM t=0/12\n", 0) == 0);

  int expected_pairs = 0;
  std::vector<Action> picks;
  for (int t = 0; t < 12; ++t) {
    const json sg = svc.suggestions(id);
    REQUIRE(sg.at("candidates").size() == 2);
    CHECK(sg.at("candidates")[0].at("label") == "A");
    const Action a = action_from_json(sg.at("candidates")[0].at("action"));
    const Action b = action_from_json(sg.at("candidates")[1].at("action"));
    expected_pairs += a != b;
    picks.push_back(a);
    const json r = svc.submit(id, {{"choice", "A"}, {"rationale", "keep it simple"}});
    CHECK(r.at("tick") == t + 1);
    CHECK(r.at("preferences_recorded") == (a != b ? 1 : 0));
  }
  CHECK(svc.get_state(id).at("done") == true);
  CHECK(status_of([&] { svc.suggestions(id); }) == 409);

  const json tr = svc.trace(id);
  const ShiftLog log = shift_log_from_jsonl(tr.at("shift_log").get<std::string>());
  REQUIRE(log.ticks.size() == 12);
  for (std::size_t k = 0; k < 12; ++k) CHECK(log.ticks[k].action == picks[k]);
  // the trace replays exactly under the session's config
  CHECK(shift_log_to_jsonl(replay(log, config_from_json(tr.at("config")))) == tr.at("shift_log").get<std::string>());

  const auto prefs = preferences_from_jsonl(svc.export_preferences());
  CHECK(static_cast<int>(prefs.size()) == expected_pairs);
  for (const auto& p : prefs) {
    CHECK(p.provenance.source == "human");
    CHECK(p.rationale == "keep it simple");
  }
}

TEST_CASE("custom actions and error responses") {
  Service svc(small_service());
  const std::string id = svc.create_session(json::object()).at("session_id");
  CHECK(status_of([&] { svc.get_state("nope"); }) == 404);
  CHECK(status_of([&] { svc.submit(id, {{"choice", "A"}}); }) == 409);
  CHECK(status_of([&] { svc.submit(id, {{"choice", "C"}}); }) == 400);
  CHECK(status_of([&] { svc.submit(id, json::object()); }) == 400);
  CHECK(status_of([&] { svc.submit(id, {{"action", "x"}}); }) == 400);
  CHECK(status_of([&] { svc.submit(id, {{"action", json::parse(R"([{"worker_id":"w99","to_line":1,"to_stage":1}])")}}); }) == 422);
  CHECK(status_of([&] { svc.create_session({{"config", {{"n_lines", -1}}}}); }) == 400);
  CHECK(svc.get_state(id).at("tick") == 0);

  svc.suggestions(id);
  const json r = svc.submit(id, {{"action", json::parse(R"([{"worker_id":"w1","to_line":0,"to_stage":0}])")}});
  CHECK(r.at("tick") == 1);
  CHECK(r.at("preferences_recorded").get<int>() >= 1);
  try {
    svc.get_state("nope");
  } catch (const ApiError& e) {
    CHECK(e.body().at("code") == "not_found");
    CHECK(e.body().contains("details"));
  }
}

TEST_CASE("HTTP API on an ephemeral port") {
  Service svc(small_service());
  const int port = svc.start("127.0.0.1", 0);
  REQUIRE(port > 0);
  httplib::Client cli("127.0.0.1", port);
  auto res = cli.Post("/sessions", R"({"seed": 3})", "application/json");
  REQUIRE(res);
  CHECK(res->status == 201);
  const std::string id = json::parse(res->body).at("session_id");

  res = cli.Get("/sessions/" + id + "/suggestions");
  REQUIRE(res);
  CHECK(res->status == 200);
  CHECK(json::parse(res->body).at("candidates").size() == 2);
  res = cli.Post("/sessions/" + id + "/action", R"({"choice": "B"})", "application/json");
  REQUIRE(res);
  CHECK(res->status == 200);
  CHECK(json::parse(res->body).at("tick") == 1);

  res = cli.Get("/sessions/" + id + "/state");
  REQUIRE(res);
  CHECK(json::parse(res->body).at("tick") == 1);
  res = cli.Get("/sessions/" + id + "/trace");
  REQUIRE(res);
  CHECK(json::parse(res->body).contains("shift_log"));
  res = cli.Get("/preferences/export");
  REQUIRE(res);
  CHECK(res->status == 200);
  CHECK(res->body.find("task_instruction") != std::string::npos);

  res = cli.Get("/sessions/missing/state");
  REQUIRE(res);
  CHECK(res->status == 404);
  CHECK(json::parse(res->body).at("code") == "not_found");
  res = cli.Post("/sessions", "{not json", "application/json");
  REQUIRE(res);
  CHECK(res->status == 400);
  res = cli.Get("/no/such/route");
  REQUIRE(res);
  CHECK(res->status == 404);
  CHECK(json::parse(res->body).contains("code"));
  svc.stop();
}

TEST_CASE("concurrent sessions stay independent") {
  Service svc(small_service());
  const int port = svc.start("127.0.0.1", 0);
  std::atomic<int> failures{0};
  std::vector<std::thread> threads;
  std::vector<std::string> ids(4);
  for (int k = 0; k < 4; ++k) {
    threads.emplace_back([&, k] {
      httplib::Client cli("127.0.0.1", port);
      auto res = cli.Post("/sessions", json{{"seed", 40 + k}}.dump(), "application/json");
      if (!res || res->status != 201) return void(++failures);
      ids[k] = json::parse(res->body).at("session_id");
      for (int t = 0; t < 12; ++t) {
        if (!cli.Get("/sessions/" + ids[k] + "/suggestions")) return void(++failures);
        res = cli.Post("/sessions/" + ids[k] + "/action", R"({"choice":"A"})", "application/json");
        if (!res || res->status != 200) return void(++failures);
      }
    });
  }
  for (auto& t : threads) t.join();
  CHECK(failures == 0);
  // each session matches a sequential replay of itself
  const SimConfig c = small_service().sim;
  for (const auto& id : ids) {
    const json tr = svc.trace(id);
    const std::string text = tr.at("shift_log");
    CHECK(shift_log_to_jsonl(replay(shift_log_from_jsonl(text), c)) == text);
    CHECK(svc.get_state(id).at("done") == true);
  }
  svc.stop();
}

TEST_CASE("service config and port resolution") {
  const ServiceConfig c = service_config_from_json({{"horizon", 4}, {"continuation", "greedy"}, {"port", 9001}});
  CHECK(c.horizon == 4);
  CHECK(c.continuation == Continuation::kGreedy);
  CHECK(c.port == 9001);
  CHECK_THROWS(service_config_from_json({{"continuation", "sideways"}}));
  ::unsetenv("SORTSIM_PORT");
  CHECK(resolve_port(8123) == 8123);
  ::setenv("SORTSIM_PORT", "9234", 1);
  CHECK(resolve_port(8123) == 9234);
  ::setenv("SORTSIM_PORT", "banana", 1);
  CHECK_THROWS_AS(resolve_port(8123), UsageError);
  ::unsetenv("SORTSIM_PORT");
}

}  // TEST_SUITE

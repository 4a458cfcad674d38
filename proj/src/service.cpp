#include "sortsim/service.hpp"

#include <array>
#include <cstdlib>
#include <fstream>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include "sortsim/eval.hpp"
#include "sortsim/rng.hpp"

// After Eigen: resolv.h, pulled in here, defines a _res macro.
#include <httplib.h>

namespace sortsim {

ServiceConfig service_config_from_json(const json& j) {
  if (!j.is_object()) throw DataError("service config: expected a JSON object");
  ServiceConfig c;
  try {
    if (j.contains("sim")) c.sim = config_from_json(j.at("sim"));
    if (j.contains("scenario")) c.scenario = scenario_from_json(j.at("scenario"));
    if (j.contains("greedy")) {
      const json& g = j.at("greedy");
      c.greedy.max_moves_per_tick = g.value("max_moves_per_tick", c.greedy.max_moves_per_tick);
      c.greedy.amortization_ticks = g.value("amortization_ticks", c.greedy.amortization_ticks);
      c.greedy.min_net_gain = g.value("min_net_gain", c.greedy.min_net_gain);
    }
    c.horizon = j.value("horizon", c.horizon);
    if (j.contains("continuation")) {
      auto cont = parse_continuation(j.at("continuation").get<std::string>());
      if (!cont) throw UsageError("service config: continuation must be no_reallocation or greedy_bottleneck");
      c.continuation = *cont;
    }
    c.host = j.value("host", c.host);
    c.port = j.value("port", c.port);
    if (j.contains("checkpoint")) {
      const std::string path = j.at("checkpoint").get<std::string>();
      std::ifstream in(path);
      if (!in) throw DataError("service config: cannot read checkpoint '" + path + "'");
      c.policy = policy_from_checkpoint(json::parse(in));
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("service config: ") + e.what());
  }
  if (auto errs = validate_config(c.sim); !errs.empty()) throw UsageError("service config: sim." + errs.front());
  if (c.horizon < 1) throw UsageError("service config: horizon must be >= 1");
  if (c.port < 0 || c.port > 65535) throw UsageError("service config: port must be in [0, 65535]");
  return c;
}

int resolve_port(int configured) {
  const char* env = std::getenv("SORTSIM_PORT");
  if (env == nullptr || *env == '\0') return configured;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (*end != '\0' || v < 0 || v > 65535) throw UsageError("SORTSIM_PORT must be a port number, got '" + std::string(env) + "'");
  return static_cast<int>(v);
}

namespace {

struct Suggestion {
  Action action;
  double score = 0.0;
  std::string source;
};

struct Session {
  std::mutex mu;  // one in-flight mutation per session
  std::string id;
  SimConfig config;
  std::uint64_t seed = 0;
  SystemState initial, state;
  std::vector<TickRecord> history;
  std::optional<std::array<Suggestion, 2>> pending;  // valid for state.tick only
  std::vector<PreferencePair> preferences;

  bool done() const { return state.tick >= config.episode_length; }
};

json violations_json(const std::vector<Violation>& v) {
  json arr = json::array();
  for (const auto& x : v) arr.push_back({{"kind", x.kind}, {"worker_id", x.worker_id}, {"message", x.message}});
  return arr;
}

json state_view(const Session& s) {
  return {{"session_id", s.id},
          {"tick", s.state.tick},
          {"episode_length", s.config.episode_length},
          {"done", s.done()},
          {"cumulative_output", s.state.cumulative_output},
          {"state_json", to_json(s.state)},
          {"state_text", serialize_state(s.state, s.config)}};
}

json suggestions_view(const Session& s, int horizon, Continuation continuation) {
  json cands = json::array();
  const char* labels[2] = {"A", "B"};
  for (int k = 0; k < 2; ++k) {
    const Suggestion& g = (*s.pending)[static_cast<std::size_t>(k)];
    cands.push_back({{"label", labels[k]}, {"source", g.source}, {"action", to_json(g.action)}, {"score", g.score}});
  }
  return {{"session_id", s.id},
          {"tick", s.state.tick},
          {"horizon", horizon},
          {"continuation", continuation_name(continuation)},
          {"distinct", (*s.pending)[0].action != (*s.pending)[1].action},
          {"candidates", cands}};
}

json parse_body(const std::string& body) {
  if (body.empty()) return json::object();
  json j = json::parse(body, nullptr, false);
  if (j.is_discarded()) throw ApiError(400, "invalid_json", "request body is not valid JSON");
  return j;
}

}  // namespace

struct Service::Impl {
  ServiceConfig config;
  std::mutex store_mu;
  std::map<std::string, std::shared_ptr<Session>> sessions;
  std::uint64_t next_id = 1;
  std::mutex prefs_mu;
  std::vector<PreferencePair> preferences;  // append-only, all sessions
  httplib::Server server;
  std::thread listener;

  std::shared_ptr<Session> find(const std::string& id) {
    std::lock_guard lock(store_mu);
    auto it = sessions.find(id);
    if (it == sessions.end()) throw ApiError(404, "not_found", "unknown session '" + id + "'", {{"session_id", id}});
    return it->second;
  }

  Action first_proposal(const Session& s, std::string* source) const {
    if (!config.policy) {
      *source = "no_reallocation";
      return Action{};
    }
    *source = "policy_sample";
    Rng rng(derive_seed(derive_seed(s.seed, 0x5a6617ULL), static_cast<std::uint64_t>(s.state.tick)));
    Action a = decode_action(*config.policy, extract_features(s.state, s.config), DecodeMode::kSample, &rng)
                   .action.canonical();
    if (!validate_action(s.state, a, s.config).empty()) {
      *source = "no_reallocation";
      return Action{};
    }
    return a;
  }

  void ensure_suggestions(Session& s) {
    if (s.pending) return;
    std::array<Suggestion, 2> out;
    out[0].action = first_proposal(s, &out[0].source);
    out[1].action = greedy_bottleneck(s.state, s.config, config.greedy).action.canonical();
    out[1].source = "greedy_bottleneck";
    if (out[1].action == out[0].action) {
      if (out[0].action.empty()) {
        out[1].action = best_single_move(s.state, s.config, config.greedy).canonical();
        out[1].source = "best_single_move";
      } else {
        out[1].action = Action{};
        out[1].source = "no_reallocation";
      }
    }
    for (auto& g : out) g.score = rollout_score(s.state, g.action, s.config, config.horizon, config.continuation);
    s.pending = out;
  }

  PreferencePair make_pair(const Session& s, std::size_t pair_index, const Action& chosen, double score_chosen,
                           const Action& rejected, double score_rejected, const std::string& rationale) const {
    PreferencePair p;
    p.state_index = static_cast<std::size_t>(s.state.tick);
    p.pair_index = pair_index;
    p.state_text = serialize_state(s.state, s.config);
    p.state_json = to_json(s.state);
    p.chosen = chosen;
    p.rejected = rejected;
    p.score_chosen = score_chosen;
    p.score_rejected = score_rejected;
    p.horizon = config.horizon;
    p.continuation = continuation_name(config.continuation);
    p.margin = score_chosen - score_rejected;
    p.provenance = Provenance{"human", 0, s.seed};
    p.rationale = rationale;
    return p;
  }
};

Service::Service(ServiceConfig config) : impl_(std::make_unique<Impl>()) {
  if (auto errs = validate_config(config.sim); !errs.empty()) throw UsageError("service: sim." + errs.front());
  if (config.horizon < 1) throw UsageError("service: horizon must be >= 1");
  impl_->config = std::move(config);
}

Service::~Service() { stop(); }

json Service::create_session(const json& body) {
  if (!body.is_object()) throw ApiError(400, "invalid_request", "expected a JSON object");
  auto s = std::make_shared<Session>();
  s->config = impl_->config.sim;
  ScenarioParams scenario = impl_->config.scenario;
  try {
    if (body.contains("config")) s->config = config_from_json(body.at("config"));
    if (body.contains("scenario")) scenario = scenario_from_json(body.at("scenario"));
    s->seed = body.value("seed", std::uint64_t{1});
  } catch (const Error& e) {
    throw ApiError(400, "invalid_config", e.what());
  } catch (const json::exception& e) {
    throw ApiError(400, "invalid_config", e.what());
  }
  if (auto errs = validate_config(s->config); !errs.empty())
    throw ApiError(400, "invalid_config", "config failed validation", {{"errors", errs}});
  if (scenario.n_workers < 0 || scenario.n_misplaced < 0 || scenario.max_initial_fill < 0.0 ||
      scenario.max_initial_fill > 1.0)
    throw ApiError(400, "invalid_config", "scenario failed validation", {{"errors", {"scenario: out of range"}}});
  s->initial = make_initial_state(s->config, scenario, s->seed);
  s->state = s->initial;
  {
    std::lock_guard lock(impl_->store_mu);
    s->id = "s" + std::to_string(impl_->next_id++);
    impl_->sessions[s->id] = s;
  }
  return state_view(*s);
}

json Service::get_state(const std::string& id) {
  auto s = impl_->find(id);
  std::lock_guard lock(s->mu);
  return state_view(*s);
}

json Service::suggestions(const std::string& id) {
  auto s = impl_->find(id);
  std::lock_guard lock(s->mu);
  if (s->done()) throw ApiError(409, "session_done", "episode finished", {{"tick", s->state.tick}});
  impl_->ensure_suggestions(*s);
  return suggestions_view(*s, impl_->config.horizon, impl_->config.continuation);
}

json Service::submit(const std::string& id, const json& body) {
  if (!body.is_object()) throw ApiError(400, "invalid_request", "expected a JSON object");
  auto s = impl_->find(id);
  std::lock_guard lock(s->mu);
  if (s->done()) throw ApiError(409, "session_done", "episode finished", {{"tick", s->state.tick}});

  std::string rationale;
  if (body.contains("rationale")) {
    if (!body.at("rationale").is_string()) throw ApiError(400, "invalid_request", "rationale must be a string");
    rationale = body.at("rationale").get<std::string>();
  }

  // Index of the chosen suggestion, or -1 for a custom action.
  int choice = -1;
  Action action;
  if (body.contains("choice")) {
    const json& c = body.at("choice");
    if (!c.is_string() || (c != "A" && c != "B"))
      throw ApiError(400, "invalid_request", "choice must be \"A\" or \"B\"");
    if (!s->pending) throw ApiError(409, "no_suggestions", "request suggestions before choosing one");
    choice = c == "A" ? 0 : 1;
    action = (*s->pending)[static_cast<std::size_t>(choice)].action;
  } else if (body.contains("action")) {
    try {
      action = action_from_json(body.at("action")).canonical();
    } catch (const DataError& e) {
      throw ApiError(400, "invalid_action", e.what());
    }
    if (auto v = validate_action(s->state, action, s->config); !v.empty())
      throw ApiError(422, "invalid_action", describe(v), {{"violations", violations_json(v)}});
    if (s->pending)
      for (int k = 0; k < 2; ++k)
        if ((*s->pending)[static_cast<std::size_t>(k)].action == action) choice = k;
  } else {
    throw ApiError(400, "invalid_request", "body needs \"choice\" or \"action\"");
  }

  std::vector<PreferencePair> recorded;
  if (s->pending) {
    const auto& sg = *s->pending;
    if (choice >= 0) {
      const auto& c = sg[static_cast<std::size_t>(choice)];
      const auto& r = sg[static_cast<std::size_t>(1 - choice)];
      if (c.action != r.action)
        recorded.push_back(impl_->make_pair(*s, 0, c.action, c.score, r.action, r.score, rationale));
    } else {
      const double score = rollout_score(s->state, action, s->config, impl_->config.horizon, impl_->config.continuation);
      recorded.push_back(impl_->make_pair(*s, 0, action, score, sg[0].action, sg[0].score, rationale));
      if (sg[1].action != sg[0].action)
        recorded.push_back(impl_->make_pair(*s, 1, action, score, sg[1].action, sg[1].score, rationale));
    }
  }

  StepResult r;
  try {
    r = step(s->state, action, s->config, tick_seed(s->config, s->seed, s->state.tick));
  } catch (const InvalidActionError& e) {
    throw ApiError(422, "invalid_action", e.what(), {{"violations", violations_json(e.violations())}});
  }
  TickRecord rec;
  rec.tick = s->state.tick;
  rec.state = s->state;
  rec.action = action;
  rec.reward = r.reward;
  rec.stage_flows = r.per_stage_flow;
  rec.buffer_levels = r.next_state.buffers;
  rec.events = r.events;
  s->history.push_back(std::move(rec));
  s->state = std::move(r.next_state);
  s->pending.reset();

  s->preferences.insert(s->preferences.end(), recorded.begin(), recorded.end());
  {
    std::lock_guard lock(impl_->prefs_mu);
    impl_->preferences.insert(impl_->preferences.end(), recorded.begin(), recorded.end());
  }

  json events = json::array();
  for (const auto& e : r.events) events.push_back(to_json(e));
  json out = state_view(*s);
  out["reward"] = r.reward;
  out["applied_action"] = to_json(action);
  out["events"] = events;
  out["preferences_recorded"] = recorded.size();
  return out;
}

json Service::trace(const std::string& id) {
  auto s = impl_->find(id);
  std::lock_guard lock(s->mu);
  ShiftLog log;
  log.shift_id = s->id;
  log.seed = s->seed;
  log.initial = s->initial;
  log.ticks = s->history;
  log.final_state = s->state;
  log.meta = {{"source", "service_session"}};
  json prefs = json::array();
  for (const auto& p : s->preferences) prefs.push_back(to_json(p));
  return {{"session_id", s->id},
          {"config", to_json(s->config)},
          {"shift_log", shift_log_to_jsonl(log)},
          {"preferences", prefs}};
}

std::string Service::export_preferences() {
  std::lock_guard lock(impl_->prefs_mu);
  return preferences_to_jsonl(impl_->preferences, {{"source", "service"}});
}

namespace {

template <typename Fn>
void respond(httplib::Response& res, Fn&& fn) {
  try {
    fn();
  } catch (const ApiError& e) {
    res.status = e.status();
    res.set_content(e.body().dump(), "application/json");
  } catch (const std::exception& e) {
    res.status = 500;
    res.set_content(ApiError(500, "internal", e.what()).body().dump(), "application/json");
  }
}

void send_json(httplib::Response& res, const json& j) { res.set_content(j.dump(), "application/json"); }

}  // namespace

int Service::start(const std::string& host, int port) {
  auto& srv = impl_->server;
  srv.Post("/sessions", [this](const httplib::Request& req, httplib::Response& res) {
    respond(res, [&] {
      send_json(res, create_session(parse_body(req.body)));
      res.status = 201;
    });
  });
  srv.Get(R"(/sessions/([^/]+)/state)", [this](const httplib::Request& req, httplib::Response& res) {
    respond(res, [&] { send_json(res, get_state(req.matches[1])); });
  });
  srv.Get(R"(/sessions/([^/]+)/suggestions)", [this](const httplib::Request& req, httplib::Response& res) {
    respond(res, [&] { send_json(res, suggestions(req.matches[1])); });
  });
  srv.Post(R"(/sessions/([^/]+)/action)", [this](const httplib::Request& req, httplib::Response& res) {
    respond(res, [&] { send_json(res, submit(req.matches[1], parse_body(req.body))); });
  });
  srv.Get(R"(/sessions/([^/]+)/trace)", [this](const httplib::Request& req, httplib::Response& res) {
    respond(res, [&] { send_json(res, trace(req.matches[1])); });
  });
  srv.Get("/preferences/export", [this](const httplib::Request&, httplib::Response& res) {
    respond(res, [&] {
      res.set_content(export_preferences(), "application/x-ndjson");
      res.set_header("Content-Disposition", "attachment; filename=\"preferences.jsonl\"");
    });
  });
  srv.set_error_handler([](const httplib::Request&, httplib::Response& res) {
    if (!res.body.empty()) return;
    const std::string code = res.status == 404 ? "not_found" : "http_error";
    res.set_content(ApiError(res.status, code, httplib::status_message(res.status)).body().dump(), "application/json");
  });

  const int bound = port == 0 ? srv.bind_to_any_port(host) : (srv.bind_to_port(host, port) ? port : -1);
  if (bound < 0) throw UsageError("service: cannot bind " + host + ":" + std::to_string(port));
  impl_->listener = std::thread([&srv] { srv.listen_after_bind(); });
  srv.wait_until_ready();  // stop() before the accept loop runs would be lost
  return bound;
}

void Service::wait() {
  if (impl_->listener.joinable()) impl_->listener.join();
}

void Service::stop() {
  impl_->server.stop();
  wait();
}

}  // namespace sortsim

#include "sortsim/sortsim.h"

#include <cstdlib>
#include <cstring>
#include <memory>
#include <new>
#include <string>

#include "sortsim/agents.hpp"
#include "sortsim/eval.hpp"
#include "sortsim/learn.hpp"
#include "sortsim/pipeline.hpp"
#include "sortsim/prefgen.hpp"
#include "sortsim/service.hpp"
#include "sortsim/sim.hpp"

#ifndef SORTSIM_VERSION_STRING
#define SORTSIM_VERSION_STRING "0.0.0"
#endif

struct sortsim_sim {
  sortsim::SimConfig config;
  sortsim::SystemState state;
  std::uint64_t seed = 0;
};

struct sortsim_policy {
  sortsim::FactorizedPolicy policy;
};

struct sortsim_server {
  sortsim::ServiceConfig config;
  std::unique_ptr<sortsim::Service> service;
};

namespace {

thread_local std::string g_last_error;

sortsim_status fail(sortsim_status code, const std::string& message) {
  g_last_error = message;
  return code;
}

char* dup_string(const std::string& s) {
  char* p = static_cast<char*>(std::malloc(s.size() + 1));
  if (p == nullptr) throw std::bad_alloc();
  std::memcpy(p, s.data(), s.size() + 1);
  return p;
}

sortsim::json parse_json(const char* text, const char* what) {
  if (text == nullptr) throw sortsim::UsageError(std::string(what) + ": NULL");
  sortsim::json j = sortsim::json::parse(text, nullptr, false);
  if (j.is_discarded()) throw sortsim::DataError(std::string(what) + ": invalid JSON");
  return j;
}

template <typename Fn>
sortsim_status guarded(Fn&& fn) {
  try {
    fn();
    return SORTSIM_OK;
  } catch (const sortsim::UsageError& e) {
    return fail(SORTSIM_ERR_USAGE, e.what());
  } catch (const sortsim::DataError& e) {
    return fail(SORTSIM_ERR_DATA, e.what());
  } catch (const sortsim::NotFoundError& e) {
    return fail(SORTSIM_ERR_DATA, e.what());
  } catch (const sortsim::NumericError& e) {
    return fail(SORTSIM_ERR_NUMERIC, e.what());
  } catch (const sortsim::ApiError& e) {
    return fail(e.status() < 500 ? SORTSIM_ERR_USAGE : SORTSIM_ERR_INTERNAL, e.what());
  } catch (const sortsim::json::exception& e) {
    return fail(SORTSIM_ERR_DATA, e.what());
  } catch (const std::bad_alloc&) {
    return fail(SORTSIM_ERR_INTERNAL, "out of memory");
  } catch (const std::exception& e) {
    return fail(SORTSIM_ERR_INTERNAL, e.what());
  }
}

void require(const void* p, const char* name) {
  if (p == nullptr) throw sortsim::UsageError(std::string(name) + " must not be NULL");
}

sortsim_status run_pipeline(sortsim::json (*fn)(const sortsim::json&), const char* request, char** out) {
  return guarded([&] {
    require(out, "summary_out");
    *out = dup_string(fn(parse_json(request, "request")).dump());
  });
}

}  // namespace

extern "C" {

const char* sortsim_version(void) { return SORTSIM_VERSION_STRING; }

const char* sortsim_last_error(void) { return g_last_error.c_str(); }

void sortsim_string_free(char* s) { std::free(s); }

sortsim_status sortsim_sim_create(const char* config_json, const char* scenario_json, uint64_t seed,
                                  sortsim_sim** out) {
  return guarded([&] {
    require(out, "out");
    *out = nullptr;
    auto sim = std::make_unique<sortsim_sim>();
    sim->config = config_json ? sortsim::config_from_json(parse_json(config_json, "config"))
                              : sortsim::SimConfig::defaults();
    if (auto errs = sortsim::validate_config(sim->config); !errs.empty())
      throw sortsim::UsageError("config: " + errs.front());
    const sortsim::ScenarioParams scenario =
        scenario_json ? sortsim::scenario_from_json(parse_json(scenario_json, "scenario")) : sortsim::ScenarioParams{};
    sim->seed = seed;
    sim->state = sortsim::make_initial_state(sim->config, scenario, seed);
    *out = sim.release();
  });
}

void sortsim_sim_destroy(sortsim_sim* sim) { delete sim; }

sortsim_status sortsim_sim_tick(const sortsim_sim* sim, int* tick, int* done) {
  return guarded([&] {
    require(sim, "sim");
    if (tick) *tick = sim->state.tick;
    if (done) *done = sim->state.tick >= sim->config.episode_length ? 1 : 0;
  });
}

sortsim_status sortsim_sim_state_json(const sortsim_sim* sim, char** out) {
  return guarded([&] {
    require(sim, "sim");
    require(out, "out");
    *out = dup_string(sortsim::to_json(sim->state).dump());
  });
}

sortsim_status sortsim_sim_state_text(const sortsim_sim* sim, char** out) {
  return guarded([&] {
    require(sim, "sim");
    require(out, "out");
    *out = dup_string(sortsim::serialize_state(sim->state, sim->config));
  });
}

sortsim_status sortsim_sim_step(sortsim_sim* sim, const char* action_json, char** result_out) {
  return guarded([&] {
    require(sim, "sim");
    if (sim->state.tick >= sim->config.episode_length) throw sortsim::UsageError("episode finished");
    sortsim::Action action;
    try {
      action = sortsim::action_from_json(parse_json(action_json, "action"));
    } catch (const sortsim::DataError& e) {
      throw sortsim::UsageError(e.what());
    }
    auto r = sortsim::step(sim->state, action, sim->config,
                           sortsim::tick_seed(sim->config, sim->seed, sim->state.tick));
    sim->state = std::move(r.next_state);
    if (result_out) {
      sortsim::json events = sortsim::json::array();
      for (const auto& e : r.events) events.push_back(sortsim::to_json(e));
      *result_out = dup_string(sortsim::json{{"reward", r.reward},
                                             {"tick", sim->state.tick},
                                             {"done", sim->state.tick >= sim->config.episode_length},
                                             {"events", events}}
                                   .dump());
    }
  });
}

sortsim_status sortsim_sim_cumulative_output(const sortsim_sim* sim, double* out) {
  return guarded([&] {
    require(sim, "sim");
    require(out, "out");
    *out = sim->state.cumulative_output;
  });
}

sortsim_status sortsim_policy_load(const char* checkpoint_json, sortsim_policy** out) {
  return guarded([&] {
    require(out, "out");
    *out = nullptr;
    auto p = std::make_unique<sortsim_policy>();
    p->policy = sortsim::policy_from_checkpoint(parse_json(checkpoint_json, "checkpoint"));
    *out = p.release();
  });
}

void sortsim_policy_destroy(sortsim_policy* policy) { delete policy; }

sortsim_status sortsim_policy_decide(const sortsim_policy* policy, const sortsim_sim* sim, char** action_out) {
  return guarded([&] {
    require(policy, "policy");
    require(sim, "sim");
    require(action_out, "action_out");
    const auto d = sortsim::policy_decide(policy->policy, sim->state, sim->config);
    *action_out = dup_string(sortsim::to_json(d.action).dump());
  });
}

sortsim_status sortsim_greedy_decide(const sortsim_sim* sim, char** action_out) {
  return guarded([&] {
    require(sim, "sim");
    require(action_out, "action_out");
    *action_out = dup_string(sortsim::to_json(sortsim::greedy_bottleneck(sim->state, sim->config).action).dump());
  });
}

sortsim_status sortsim_parse_action(const char* text, char** result_out) {
  if (result_out == nullptr) return fail(SORTSIM_ERR_USAGE, "result_out must not be NULL");
  sortsim::ParsedAction parsed;
  const sortsim_status st = guarded([&] {
    require(text, "text");
    parsed = sortsim::parse_action(text);
    if (parsed.ok()) {
      *result_out = dup_string(sortsim::to_json(*parsed.action).dump());
    } else {
      *result_out = dup_string(sortsim::json{{"code", parsed.error->code},
                                             {"position", parsed.error->position},
                                             {"reason", parsed.error->reason}}
                                   .dump());
    }
  });
  if (st != SORTSIM_OK) return st;
  if (!parsed.ok()) return fail(SORTSIM_ERR_DATA, parsed.error->code + ": " + parsed.error->reason);
  return SORTSIM_OK;
}

sortsim_status sortsim_run_generate(const char* request_json, char** summary_out) {
  return run_pipeline(&sortsim::run_generate, request_json, summary_out);
}

sortsim_status sortsim_run_train(const char* request_json, char** summary_out) {
  return run_pipeline(&sortsim::run_train, request_json, summary_out);
}

sortsim_status sortsim_run_evaluate(const char* request_json, char** summary_out) {
  return run_pipeline(&sortsim::run_evaluate, request_json, summary_out);
}

sortsim_status sortsim_run_prefgen(const char* request_json, char** summary_out) {
  return run_pipeline(&sortsim::run_prefgen, request_json, summary_out);
}

sortsim_status sortsim_run_calibrate(const char* request_json, char** summary_out) {
  return run_pipeline(&sortsim::run_calibrate, request_json, summary_out);
}

sortsim_status sortsim_server_create(const char* service_config_json, sortsim_server** out) {
  return guarded([&] {
    require(out, "out");
    *out = nullptr;
    auto s = std::make_unique<sortsim_server>();
    if (service_config_json) s->config = sortsim::service_config_from_json(parse_json(service_config_json, "config"));
    s->service = std::make_unique<sortsim::Service>(s->config);
    *out = s.release();
  });
}

void sortsim_server_destroy(sortsim_server* server) { delete server; }

sortsim_status sortsim_server_start(sortsim_server* server, const char* host, int port, int* bound_port) {
  return guarded([&] {
    require(server, "server");
    const std::string h = host ? host : server->config.host;
    const int p = port < 0 ? sortsim::resolve_port(server->config.port) : port;
    const int bound = server->service->start(h, p);
    if (bound_port) *bound_port = bound;
  });
}

sortsim_status sortsim_server_wait(sortsim_server* server) {
  return guarded([&] {
    require(server, "server");
    server->service->wait();
  });
}

sortsim_status sortsim_server_stop(sortsim_server* server) {
  return guarded([&] {
    require(server, "server");
    server->service->stop();
  });
}

}  // extern "C"

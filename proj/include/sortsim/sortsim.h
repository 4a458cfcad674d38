#ifndef SORTSIM_SORTSIM_H
#define SORTSIM_SORTSIM_H

/* C interface to the sortation simulator, learners, evaluation and service.
 *
 * Conventions:
 *   - Every function returns a sortsim_status; outputs go through pointers.
 *   - Handles are opaque and owned by the caller until passed to *_destroy.
 *   - Strings returned through char** are heap-allocated; free them with
 *     sortsim_string_free.
 *   - On failure, sortsim_last_error() describes the most recent error on the
 *     calling thread. The pointer stays valid until the next failing call on
 *     that thread.
 *   - JSON uses the wire schemas of the library: 1-based lines and stages,
 *     0/0 for off floor. */

#include <stdint.h>

#if defined(_WIN32)
#define SORTSIM_API __declspec(dllexport)
#else
#define SORTSIM_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum sortsim_status {
  SORTSIM_OK = 0,
  SORTSIM_ERR_INTERNAL = 1,
  SORTSIM_ERR_USAGE = 2,   /* bad arguments, configuration or action */
  SORTSIM_ERR_DATA = 3,    /* malformed input files, checkpoints or replies */
  SORTSIM_ERR_NUMERIC = 4  /* training diverged or a statistic is undefined */
} sortsim_status;

typedef struct sortsim_sim sortsim_sim;
typedef struct sortsim_policy sortsim_policy;
typedef struct sortsim_server sortsim_server;

SORTSIM_API const char* sortsim_version(void);
SORTSIM_API const char* sortsim_last_error(void);
SORTSIM_API void sortsim_string_free(char* s);

/* ---- Simulator ---------------------------------------------------------- */

/* config_json and scenario_json may be NULL for defaults. */
SORTSIM_API sortsim_status sortsim_sim_create(const char* config_json, const char* scenario_json, uint64_t seed,
                                              sortsim_sim** out);
SORTSIM_API void sortsim_sim_destroy(sortsim_sim* sim);
SORTSIM_API sortsim_status sortsim_sim_tick(const sortsim_sim* sim, int* tick, int* done);
SORTSIM_API sortsim_status sortsim_sim_state_json(const sortsim_sim* sim, char** out);
SORTSIM_API sortsim_status sortsim_sim_state_text(const sortsim_sim* sim, char** out);
/* Applies action_json (an array of moves) for one tick. An invalid action
 * returns SORTSIM_ERR_USAGE and leaves the simulator unchanged. result_out
 * (may be NULL) receives {"reward", "tick", "done", "events"}. */
SORTSIM_API sortsim_status sortsim_sim_step(sortsim_sim* sim, const char* action_json, char** result_out);
/* Total stage-3 output so far. */
SORTSIM_API sortsim_status sortsim_sim_cumulative_output(const sortsim_sim* sim, double* out);

/* ---- Policies ----------------------------------------------------------- */

SORTSIM_API sortsim_status sortsim_policy_load(const char* checkpoint_json, sortsim_policy** out);
SORTSIM_API void sortsim_policy_destroy(sortsim_policy* policy);
/* Greedy decode for the simulator's current state; action_out receives the
 * action array. */
SORTSIM_API sortsim_status sortsim_policy_decide(const sortsim_policy* policy, const sortsim_sim* sim,
                                                 char** action_out);
/* Heuristic decisions for the simulator's current state. */
SORTSIM_API sortsim_status sortsim_greedy_decide(const sortsim_sim* sim, char** action_out);

/* ---- Text protocol ------------------------------------------------------ */

/* Extracts an action from free text. On SORTSIM_ERR_DATA, result_out still
 * receives {"code", "position", "reason"}. */
SORTSIM_API sortsim_status sortsim_parse_action(const char* text, char** result_out);

/* ---- Pipelines (request and summary are JSON; see README) --------------- */

SORTSIM_API sortsim_status sortsim_run_generate(const char* request_json, char** summary_out);
SORTSIM_API sortsim_status sortsim_run_train(const char* request_json, char** summary_out);
SORTSIM_API sortsim_status sortsim_run_evaluate(const char* request_json, char** summary_out);
SORTSIM_API sortsim_status sortsim_run_prefgen(const char* request_json, char** summary_out);
SORTSIM_API sortsim_status sortsim_run_calibrate(const char* request_json, char** summary_out);

/* ---- Service ------------------------------------------------------------ */

/* service_config_json may be NULL for defaults. */
SORTSIM_API sortsim_status sortsim_server_create(const char* service_config_json, sortsim_server** out);
SORTSIM_API void sortsim_server_destroy(sortsim_server* server);
/* host NULL uses the configured host; port < 0 uses the configured port with
 * the SORTSIM_PORT override; port 0 picks a free port. */
SORTSIM_API sortsim_status sortsim_server_start(sortsim_server* server, const char* host, int port, int* bound_port);
SORTSIM_API sortsim_status sortsim_server_wait(sortsim_server* server);
SORTSIM_API sortsim_status sortsim_server_stop(sortsim_server* server);

#ifdef __cplusplus
}
#endif

#endif /* SORTSIM_SORTSIM_H */

#ifndef THERMOLOAD_H
#define THERMOLOAD_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TlStatus {
  TL_STATUS_OK = 0,
  TL_STATUS_NULL_POINTER = 1,
  TL_STATUS_INVALID_ARGUMENT = 2,
  TL_STATUS_NOT_CONVERGED = 3,
  TL_STATUS_EPISODE_OVER = 4,
  TL_STATUS_IO = 5,
  TL_STATUS_PANIC = 6,
} TlStatus;

typedef enum TlInterference {
  TL_INTERFERENCE_EXACT = 0,
  TL_INTERFERENCE_LONG_RANGE = 1,
  TL_INTERFERENCE_UPPER_BOUND = 2,
} TlInterference;

typedef enum TlScenario {
  TL_SCENARIO_IHD = 0,
  TL_SCENARIO_UHD = 1,
} TlScenario;

typedef struct TlEnvironment TlEnvironment;

/**
 * Network instance with its gain table and solver settings.
 */
typedef struct TlInstance TlInstance;

typedef struct TlPolicy TlPolicy;

/**
 * Per-cell thermal constants.
 */
typedef struct TlThermalParams {
  double lambda;
  double mu;
  double alpha;
  double beta;
  double gamma;
  double slot_seconds;
  double safe_limit;
} TlThermalParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread, or null. Valid until
 * the next failing call on the same thread.
 */
const char *tl_last_error(void);

struct TlThermalParams tl_thermal_params_default(void);

/**
 * Generates an instance with default radio parameters.
 *
 * # Safety
 * `out` must be valid for writes.
 */
enum TlStatus tl_instance_new(size_t cells,
                              size_t users_per_cell,
                              size_t rb_count,
                              uint64_t seed,
                              enum TlInterference mode,
                              struct TlInstance **out);

/**
 * # Safety
 * `inst` must come from [`tl_instance_new`] and not be used afterwards.
 */
void tl_instance_free(struct TlInstance *inst);

/**
 * # Safety
 * `inst` must be a live instance handle.
 */
size_t tl_instance_cells(const struct TlInstance *inst);

/**
 * Solves the load-coupling fixed point from zero for per-cell demands
 * (bit/s) and writes the maximum cell load. `NotConverged` is returned when
 * the iteration diverges or stalls; `rho_hat` is still written.
 *
 * # Safety
 * `demand` must hold `len` values; `rho_hat` must be valid for writes.
 */
enum TlStatus tl_solve_loads(const struct TlInstance *inst,
                             const double *demand,
                             size_t len,
                             double d_max,
                             double *rho_hat);

/**
 * # Safety
 * `params` must point to valid parameters; outputs must be valid for writes.
 */
enum TlStatus tl_risk_temperature(const struct TlThermalParams *params,
                                  double sigma_bar,
                                  double ambient,
                                  double d_max,
                                  double *value,
                                  bool *always_at_risk);

/**
 * Advances `cells` chips one slot with the true efficiencies and writes the
 * next temperatures to `out`.
 *
 * # Safety
 * All arrays must hold `cells` values.
 */
enum TlStatus tl_thermal_step(const struct TlThermalParams *params,
                              size_t cells,
                              const double *chip,
                              const double *ambient,
                              const double *sigma,
                              const double *demand,
                              const double *next_ambient,
                              double *out);

/**
 * Environment over `inst` with the default reward configuration.
 *
 * # Safety
 * `inst` must be live; `out` valid for writes.
 */
enum TlStatus tl_env_new(const struct TlInstance *inst,
                         enum TlScenario scenario,
                         size_t slots,
                         struct TlEnvironment **out);

/**
 * # Safety
 * `env` must come from [`tl_env_new`] and not be used afterwards.
 */
void tl_env_free(struct TlEnvironment *env);

/**
 * # Safety
 * `env` must be live.
 */
size_t tl_env_state_dim(const struct TlEnvironment *env);

/**
 * Starts an episode on a generated trace and writes the first state.
 *
 * # Safety
 * `state` must hold `state_len` values.
 */
enum TlStatus tl_env_reset(struct TlEnvironment *env,
                           double mean_ambient,
                           uint64_t seed,
                           double *state,
                           size_t state_len);

/**
 * Applies a per-cell demand action (bit/s) and writes the next state,
 * reward and whether the episode has ended.
 *
 * # Safety
 * `action` must hold one value per cell and `state` `state_len` values.
 */
enum TlStatus tl_env_step(struct TlEnvironment *env,
                          const double *action,
                          size_t action_len,
                          double *state,
                          size_t state_len,
                          double *reward,
                          bool *done);

/**
 * Loads a policy checkpoint written by the `train` verb.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` valid for writes.
 */
enum TlStatus tl_policy_load(const char *path, struct TlPolicy **out);

/**
 * # Safety
 * `policy` must come from [`tl_policy_load`] and not be used afterwards.
 */
void tl_policy_free(struct TlPolicy *policy);

/**
 * # Safety
 * `policy` must be live.
 */
size_t tl_policy_state_dim(const struct TlPolicy *policy);

/**
 * # Safety
 * `policy` must be live.
 */
size_t tl_policy_action_dim(const struct TlPolicy *policy);

/**
 * Deterministic (mean) action in bit/s.
 *
 * # Safety
 * `state` must hold `state_len` values and `action` `action_len` values.
 */
enum TlStatus tl_policy_act(const struct TlPolicy *policy,
                            const double *state,
                            size_t state_len,
                            double *action,
                            size_t action_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* THERMOLOAD_H */

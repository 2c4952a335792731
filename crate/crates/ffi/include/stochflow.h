#ifndef STOCHFLOW_H
#define STOCHFLOW_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum StochflowStatus {
  STOCHFLOW_STATUS_OK = 0,
  STOCHFLOW_STATUS_NULL_POINTER = 1,
  STOCHFLOW_STATUS_INVALID_ARGUMENT = 2,
  STOCHFLOW_STATUS_INVALID_CONFIG = 3,
  STOCHFLOW_STATUS_NUMERICAL = 4,
  STOCHFLOW_STATUS_IO = 5,
  STOCHFLOW_STATUS_PANIC = 6,
} StochflowStatus;

/**
 * Simulated trajectories with their pathwise densities.
 */
typedef struct StochflowEnsemble StochflowEnsemble;

/**
 * Coefficient field `(sigma, b)`.
 */
typedef struct StochflowField StochflowField;

/**
 * Weight measure `(1 + |x|^2)^(-alpha) dx`.
 */
typedef struct StochflowMeasure StochflowMeasure;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message on this thread into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full message length in bytes.
 *
 * # Safety
 * `buf` must be null or valid for `len` bytes.
 */
size_t stochflow_last_error(char *buf, size_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *stochflow_version(void);

/**
 * # Safety
 * `out_measure` must be valid for writes.
 */
enum StochflowStatus stochflow_measure_new(size_t dim,
                                           double alpha,
                                           struct StochflowMeasure **out_measure);

/**
 * Weight at `x` (length = the measure dimension).
 *
 * # Safety
 * `measure` must come from `stochflow_measure_new`; `x` must hold `dim` doubles.
 */
enum StochflowStatus stochflow_measure_weight(const struct StochflowMeasure *measure,
                                              const double *x,
                                              size_t dim,
                                              double *out_weight);

/**
 * Total mass `mu(R^n)`.
 *
 * # Safety
 * `measure` must come from `stochflow_measure_new`.
 */
enum StochflowStatus stochflow_measure_mass(const struct StochflowMeasure *measure,
                                            double *out_mass);

/**
 * # Safety
 * `measure` must be null or come from `stochflow_measure_new`, and not be freed twice.
 */
void stochflow_measure_free(struct StochflowMeasure *measure);

/**
 * Builds a catalog field from JSON such as `{"name": "ou", "theta": 2.0}`.
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out_field` must be valid for writes.
 */
enum StochflowStatus stochflow_field_from_json(const char *json, struct StochflowField **out_field);

/**
 * State and noise dimensions of a field.
 *
 * # Safety
 * `field` must come from this library; the out pointers must be valid.
 */
enum StochflowStatus stochflow_field_dims(const struct StochflowField *field,
                                          size_t *out_dim,
                                          size_t *out_noise_dim);

/**
 * Bump-kernel mollification at level `k`, as a new field.
 *
 * # Safety
 * `field` must come from this library; `out_field` must be valid for writes.
 */
enum StochflowStatus stochflow_field_mollify(const struct StochflowField *field,
                                             uint32_t level,
                                             struct StochflowField **out_field);

/**
 * # Safety
 * `field` must be null or come from this library, and not be freed twice.
 */
void stochflow_field_free(struct StochflowField *field);

/**
 * Integrates `paths` trajectories from points drawn from `measure`, each with
 * its own Brownian path, tracking densities. Fully determined by `seed`.
 *
 * # Safety
 * Handles must come from this library; `out_ensemble` must be valid for writes.
 */
enum StochflowStatus stochflow_simulate(const struct StochflowField *field,
                                        const struct StochflowMeasure *measure,
                                        double dt,
                                        double horizon,
                                        size_t stride,
                                        size_t paths,
                                        uint64_t seed,
                                        struct StochflowEnsemble **out_ensemble);

/**
 * Number of trajectories, recorded times, and state dimension.
 *
 * # Safety
 * `ensemble` must come from `stochflow_simulate`; out pointers must be valid.
 */
enum StochflowStatus stochflow_ensemble_shape(const struct StochflowEnsemble *ensemble,
                                              size_t *out_paths,
                                              size_t *out_records,
                                              size_t *out_dim);

/**
 * Copies the state of trajectory `path` at record `record` into `out_state`
 * (capacity `len`, at least the state dimension).
 *
 * # Safety
 * `ensemble` must come from `stochflow_simulate`; `out_state` must hold `len` doubles.
 */
enum StochflowStatus stochflow_ensemble_state(const struct StochflowEnsemble *ensemble,
                                              size_t path,
                                              size_t record,
                                              double *out_state,
                                              size_t len);

/**
 * Pathwise density `rho~` of trajectory `path` at record `record`.
 *
 * # Safety
 * `ensemble` must come from `stochflow_simulate`; `out_rho` must be valid.
 */
enum StochflowStatus stochflow_ensemble_rho(const struct StochflowEnsemble *ensemble,
                                            size_t path,
                                            size_t record,
                                            double *out_rho);

/**
 * `||rho_t||_{L^p(P x mu)}` at a recorded time, with its standard error.
 *
 * # Safety
 * `ensemble` must come from `stochflow_simulate`; out pointers must be valid.
 */
enum StochflowStatus stochflow_density_lp(const struct StochflowEnsemble *ensemble,
                                          double p,
                                          size_t record,
                                          double *out_norm,
                                          double *out_se);

/**
 * # Safety
 * `ensemble` must be null or come from `stochflow_simulate`, and not be freed twice.
 */
void stochflow_ensemble_free(struct StochflowEnsemble *ensemble);

/**
 * Runs a TOML experiment config, writing its CSV files and `summary.json`
 * into `out_dir`. `out_all_pass` receives 1 when every assertion passed.
 *
 * # Safety
 * Strings must be NUL-terminated; `out_all_pass` must be valid for writes.
 */
enum StochflowStatus stochflow_run_config(const char *config_toml,
                                          const char *out_dir,
                                          int32_t *out_all_pass);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STOCHFLOW_H */

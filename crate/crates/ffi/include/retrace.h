#ifndef RETRACE_H
#define RETRACE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum RetraceStatus {
  RETRACE_STATUS_OK = 0,
  RETRACE_STATUS_NULL_POINTER = 1,
  RETRACE_STATUS_CONTRACT = 2,
  RETRACE_STATUS_NUMERIC = 3,
  RETRACE_STATUS_NOT_READY = 4,
  RETRACE_STATUS_CONFIG = 5,
  RETRACE_STATUS_IO = 6,
  RETRACE_STATUS_PANIC = 7,
} RetraceStatus;

/**
 * Opaque environment handle.
 */
typedef struct RetraceEnv RetraceEnv;

/**
 * Opaque trainer handle.
 */
typedef struct RetraceTrainer RetraceTrainer;

/**
 * Outcome of one environment step.
 */
typedef struct RetraceStep {
  double reward;
  bool terminal;
  bool irreversible;
} RetraceStep;

/**
 * Loss components of one training step.
 */
typedef struct RetraceStepReport {
  double total;
  double elbo;
  double kl;
  double recon;
  double retrace;
  double masked_fraction;
  double actor_loss;
  double critic_loss;
} RetraceStepReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copy the last error message (NUL-terminated, truncated to `len`) into
 * `buf`. Returns the full message length in bytes, excluding the NUL.
 *
 * # Safety
 * `buf` must be null or valid for `len` bytes.
 */
size_t retrace_last_error(char *buf, size_t len);

/**
 * Create an environment from an `[env]`-style TOML table (empty for the
 * PointMaze defaults).
 *
 * # Safety
 * `spec_toml` must be a NUL-terminated string; `out` must be writable.
 */
enum RetraceStatus retrace_env_new(const char *spec_toml, struct RetraceEnv **out_env);

/**
 * # Safety
 * `env` must be null or a handle from [`retrace_env_new`] not yet freed.
 */
void retrace_env_free(struct RetraceEnv *env);

/**
 * Observation dimension, or 0 for a null handle.
 *
 * # Safety
 * `env` must be null or a live handle.
 */
size_t retrace_env_obs_dim(const struct RetraceEnv *env);

/**
 * Action dimension, or 0 for a null handle.
 *
 * # Safety
 * `env` must be null or a live handle.
 */
size_t retrace_env_action_dim(const struct RetraceEnv *env);

/**
 * Reset and write the first observation (`obs_len` must equal the
 * observation dimension).
 *
 * # Safety
 * `env` must be a live handle; `obs` valid for `obs_len` values.
 */
enum RetraceStatus retrace_env_reset(struct RetraceEnv *env,
                                     uint64_t seed,
                                     double *obs,
                                     size_t obs_len);

/**
 * Apply one action with action repeat; rewards are summed over repeats.
 *
 * # Safety
 * `env` must be a live handle; `action` valid for `action_len` values,
 * `obs` for `obs_len` values; `step` writable.
 */
enum RetraceStatus retrace_env_step(struct RetraceEnv *env,
                                    const double *action,
                                    size_t action_len,
                                    double *obs,
                                    size_t obs_len,
                                    struct RetraceStep *step);

/**
 * Build a trainer from run-config TOML (the same format the CLI reads).
 *
 * # Safety
 * `config_toml` must be a NUL-terminated string; `out_trainer` writable.
 */
enum RetraceStatus retrace_trainer_new(const char *config_toml,
                                       struct RetraceTrainer **out_trainer);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out_trainer` writable.
 */
enum RetraceStatus retrace_trainer_load(const char *path, struct RetraceTrainer **out_trainer);

/**
 * # Safety
 * `trainer` must be a live handle; `path` a NUL-terminated string.
 */
enum RetraceStatus retrace_trainer_save(const struct RetraceTrainer *trainer, const char *path);

/**
 * # Safety
 * `trainer` must be null or a handle not yet freed.
 */
void retrace_trainer_free(struct RetraceTrainer *trainer);

/**
 * Collect random-policy episodes until a batch can be sampled.
 *
 * # Safety
 * `trainer` must be a live handle.
 */
enum RetraceStatus retrace_trainer_warmup(struct RetraceTrainer *trainer);

/**
 * One model update plus one actor-critic update.
 *
 * # Safety
 * `trainer` must be a live handle; `report` null or writable.
 */
enum RetraceStatus retrace_trainer_step(struct RetraceTrainer *trainer,
                                        struct RetraceStepReport *report);

/**
 * Number of completed train steps, or 0 for a null handle.
 *
 * # Safety
 * `trainer` must be null or a live handle.
 */
uint64_t retrace_trainer_global_step(const struct RetraceTrainer *trainer);

/**
 * Greedy evaluation; `sd` is the sample standard deviation.
 *
 * # Safety
 * `trainer` must be a live handle; `mean` and `sd` writable.
 */
enum RetraceStatus retrace_trainer_evaluate(const struct RetraceTrainer *trainer,
                                            size_t episodes,
                                            uint64_t seed,
                                            double *mean,
                                            double *sd);

/**
 * Squared 2-Wasserstein distance between two diagonal Gaussians.
 *
 * # Safety
 * All four arrays must hold `dim` values; `result` writable.
 */
enum RetraceStatus retrace_w2_diag(const double *mu_p,
                                   const double *sd_p,
                                   const double *mu_q,
                                   const double *sd_q,
                                   size_t dim,
                                   double *result);

/**
 * `KL(p || q)` between two diagonal Gaussians.
 *
 * # Safety
 * All four arrays must hold `dim` values; `result` writable.
 */
enum RetraceStatus retrace_kl_diag(const double *mu_p,
                                   const double *sd_p,
                                   const double *mu_q,
                                   const double *sd_q,
                                   size_t dim,
                                   double *result);

/**
 * Adaptive truncation mask for one Q-value sequence, written to `mask`
 * (same length as `q`).
 *
 * # Safety
 * `q` and `mask` must hold `len` values.
 */
enum RetraceStatus retrace_truncation_mask(const double *q,
                                           size_t len,
                                           size_t window,
                                           double eta,
                                           size_t tau_back,
                                           bool disjunctive,
                                           double *mask);

/**
 * One-sided Welch t-test of `mean(a) > mean(b)`.
 *
 * # Safety
 * `a` holds `na` values, `b` holds `nb`; `t`, `df`, `p` writable.
 */
enum RetraceStatus retrace_welch_one_sided(const double *a,
                                           size_t na,
                                           const double *b,
                                           size_t nb,
                                           double *t,
                                           double *df,
                                           double *p);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RETRACE_H */

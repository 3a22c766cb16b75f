#ifndef FORA_H
#define FORA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum ForaStatus {
  FORA_STATUS_OK = 0,
  FORA_STATUS_IO = 1,
  FORA_STATUS_CONFIG = 2,
  FORA_STATUS_NUMERICAL = 3,
  FORA_STATUS_NULL_POINTER = 4,
  FORA_STATUS_INVALID_UTF8 = 5,
  FORA_STATUS_BUFFER_TOO_SMALL = 6,
  FORA_STATUS_PANIC = 7,
} ForaStatus;

/**
 * Experiment configuration.
 */
typedef struct ForaConfig ForaConfig;

/**
 * A finished training run.
 */
typedef struct ForaRun ForaRun;

/**
 * A generated planted-layer task.
 */
typedef struct ForaTask ForaTask;

/**
 * Scalar results of a run.
 */
typedef struct ForaRunMetrics {
  size_t params;
  double init_eval_loss;
  double final_eval_loss;
  double final_train_loss;
  double erank_ratio;
  double kl_drift;
  double drift_max;
  double planted_jaccard;
} ForaRunMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failing call on this thread, or null. Valid until the
 * next failing call on the same thread.
 */
const char *fora_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *fora_version(void);

/**
 * Desk-default configuration. Never null.
 */
struct ForaConfig *fora_config_default(void);

/**
 * Parse a TOML configuration.
 *
 * # Safety
 * `toml` must be a NUL-terminated string and `out` a valid pointer.
 */
enum ForaStatus fora_config_from_toml(const char *toml, struct ForaConfig **out);

/**
 * # Safety
 * `cfg` must come from this library and not be used afterwards.
 */
void fora_config_free(struct ForaConfig *cfg);

/**
 * Set the number of training steps.
 *
 * # Safety
 * `cfg` must be a live handle.
 */
enum ForaStatus fora_config_set_steps(struct ForaConfig *cfg, size_t steps);

/**
 * Run a CLI subcommand (`score`, `train`, `diag`, `ablate`, `sweep-k`,
 * `matched`, `gen-task`) writing into `out_dir`. `train` and `diag` use the
 * FoRA arm.
 *
 * # Safety
 * `cfg` must be a live handle; strings must be NUL-terminated.
 */
enum ForaStatus fora_run_command(const struct ForaConfig *cfg,
                                 const char *command,
                                 uint64_t seed,
                                 const char *out_dir);

/**
 * Generate the planted-layer task for `seed`.
 *
 * # Safety
 * `cfg` must be a live handle and `out` a valid pointer.
 */
enum ForaStatus fora_task_new(const struct ForaConfig *cfg, uint64_t seed, struct ForaTask **out);

/**
 * # Safety
 * `task` must come from this library and not be used afterwards.
 */
void fora_task_free(struct ForaTask *task);

/**
 * Sorted indices of the planted layers.
 *
 * # Safety
 * `task` must be a live handle; `out` must hold `cap` elements.
 */
enum ForaStatus fora_task_planted(const struct ForaTask *task,
                                  size_t *out,
                                  size_t cap,
                                  size_t *len);

/**
 * KL(teacher ‖ student base) on the task's eval split.
 *
 * # Safety
 * `task` must be a live handle and `out` a valid pointer.
 */
enum ForaStatus fora_task_teacher_kl(const struct ForaTask *task, double *out);

/**
 * Per-layer Fisher scores of the task's student base, using the configured
 * number of calibration batches and estimator.
 *
 * # Safety
 * `cfg` and `task` must be live handles; `out` must hold `cap` elements.
 */
enum ForaStatus fora_fisher_scores(const struct ForaConfig *cfg,
                                   const struct ForaTask *task,
                                   double *out,
                                   size_t cap,
                                   size_t *len);

/**
 * Indices of the `k` largest of `n` scores, ascending, ties to the lower
 * index. `out` must hold `k` elements.
 *
 * # Safety
 * `scores` must hold `n` elements and `out` `k` elements.
 */
enum ForaStatus fora_select_topk(const double *scores, size_t n, size_t k, size_t *out);

/**
 * Entropy effective rank of a list of singular values.
 *
 * # Safety
 * `values` must hold `n` elements and `out` be a valid pointer.
 */
enum ForaStatus fora_effective_rank(const double *values, size_t n, double *out);

/**
 * Train one arm (`fora`, `fg_lora`, `stiefel_lora`, `lora_all`,
 * `rank_halved`, `random_k`) on the planted task for `seed`.
 *
 * # Safety
 * `cfg` must be a live handle, `arm` NUL-terminated, `out` valid.
 */
enum ForaStatus fora_train(const struct ForaConfig *cfg,
                           const char *arm,
                           uint64_t seed,
                           struct ForaRun **out);

/**
 * # Safety
 * `run` must come from this library and not be used afterwards.
 */
void fora_run_free(struct ForaRun *run);

/**
 * # Safety
 * `run` must be a live handle and `out` a valid pointer.
 */
enum ForaStatus fora_run_metrics(const struct ForaRun *run, struct ForaRunMetrics *out);

/**
 * Per-step training losses.
 *
 * # Safety
 * `run` must be a live handle; `out` must hold `cap` elements.
 */
enum ForaStatus fora_run_losses(const struct ForaRun *run, double *out, size_t cap, size_t *len);

/**
 * Write the run's adapters as a checkpoint plus JSON manifest.
 *
 * # Safety
 * `cfg` and `run` must be live handles; `path` NUL-terminated.
 */
enum ForaStatus fora_run_save_adapters(const struct ForaConfig *cfg,
                                       const struct ForaRun *run,
                                       const char *path);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FORA_H */

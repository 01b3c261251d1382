#ifndef LFPROMPT_H
#define LFPROMPT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/**
 * Which evaluation inputs of a task to predict on.
 */
typedef enum LfpSplit {
  LFP_SPLIT_TRAIN = 0,
  LFP_SPLIT_TEST = 1,
  LFP_SPLIT_NEAR_OOD = 2,
  LFP_SPLIT_FAR_OOD = 3,
} LfpSplit;

typedef enum LfpStatus {
  LFP_STATUS_OK = 0,
  LFP_STATUS_NULL_POINTER = 1,
  LFP_STATUS_INVALID_UTF8 = 2,
  LFP_STATUS_CONFIG = 3,
  LFP_STATUS_INVALID_INPUT = 4,
  LFP_STATUS_BUDGET = 5,
  LFP_STATUS_STAGNATION = 6,
  LFP_STATUS_PROTOCOL = 7,
  LFP_STATUS_ACCESS_DENIED = 8,
  LFP_STATUS_NUMERICAL = 9,
  LFP_STATUS_IO = 10,
  LFP_STATUS_BUFFER_TOO_SMALL = 11,
  LFP_STATUS_PANIC = 12,
  LFP_STATUS_OTHER = 13,
} LfpStatus;

/**
 * A weighted posterior sample set.
 */
typedef struct LfpEnsemble LfpEnsemble;

/**
 * The outcome of one experiment run.
 */
typedef struct LfpReport LfpReport;

/**
 * A resolved task: simulator, projection, prior and data splits.
 */
typedef struct LfpTask LfpTask;

typedef struct LfpMetrics {
  double accuracy;
  double ece;
  double aurrrc_entropy;
  double aurrrc_maxp;
  double lower_bound;
} LfpMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. Valid until the
 * next call on the same thread.
 */
const char *lfp_last_error(void);

/**
 * Library version as a static nul-terminated string.
 */
const char *lfp_version(void);

/**
 * Resolves a task from its JSON description (`{"synthetic": {...}}` or
 * `{"external": {...}}`).
 *
 * # Safety
 * `task_json` must be a nul-terminated string; `out` must be writable.
 */
enum LfpStatus lfp_task_new(const char *task_json, struct LfpTask **out);

/**
 * # Safety
 * `task` must be null or a handle from [`lfp_task_new`] not yet freed.
 */
void lfp_task_free(struct LfpTask *task);

/**
 * Subspace dimension, class count and number of inputs in `split`.
 *
 * # Safety
 * `task` must be a live handle; output pointers may be null to skip.
 */
enum LfpStatus lfp_task_shape(const struct LfpTask *task,
                              enum LfpSplit split,
                              uintptr_t *dim,
                              uintptr_t *classes,
                              uintptr_t *inputs);

/**
 * Labels of the train or test split, written into `out[0..n]`.
 *
 * # Safety
 * `task` must be a live handle and `out` must hold `len` values.
 */
enum LfpStatus lfp_task_labels(const struct LfpTask *task,
                               enum LfpSplit split,
                               uint32_t *out,
                               uintptr_t len);

/**
 * Runs an experiment from its JSON config; writes artifacts if the config
 * names an output directory.
 *
 * # Safety
 * `config_json` must be a nul-terminated string; `out` must be writable.
 */
enum LfpStatus lfp_experiment_run(const char *config_json, struct LfpReport **out);

/**
 * # Safety
 * `report` must be null or a handle from [`lfp_experiment_run`] not yet freed.
 */
void lfp_report_free(struct LfpReport *report);

/**
 * Summary JSON, owned by the report.
 *
 * # Safety
 * `report` must be a live handle.
 */
const char *lfp_report_summary(const struct LfpReport *report);

/**
 * Test-split metrics of the run.
 *
 * # Safety
 * `report` must be a live handle and `out` writable.
 */
enum LfpStatus lfp_report_metrics(const struct LfpReport *report, struct LfpMetrics *out);

/**
 * Writes the report's artifacts into directory `dir`.
 *
 * # Safety
 * `report` must be a live handle and `dir` a nul-terminated string.
 */
enum LfpStatus lfp_report_write(const struct LfpReport *report, const char *dir);

/**
 * Copies the report's posterior into a new ensemble handle.
 *
 * # Safety
 * `report` must be a live handle and `out` writable.
 */
enum LfpStatus lfp_report_ensemble(const struct LfpReport *report, struct LfpEnsemble **out);

/**
 * # Safety
 * `ensemble` must be null or a live ensemble handle.
 */
void lfp_ensemble_free(struct LfpEnsemble *ensemble);

/**
 * Sample count and per-sample dimension.
 *
 * # Safety
 * `ensemble` must be a live handle; output pointers may be null to skip.
 */
enum LfpStatus lfp_ensemble_shape(const struct LfpEnsemble *ensemble,
                                  uintptr_t *len,
                                  uintptr_t *dim);

/**
 * Copies sample `index` into `out[0..dim]`.
 *
 * # Safety
 * `ensemble` must be a live handle and `out` must hold `len` values.
 */
enum LfpStatus lfp_ensemble_sample(const struct LfpEnsemble *ensemble,
                                   uintptr_t index,
                                   double *out,
                                   uintptr_t len);

/**
 * Copies the normalized weights into `out[0..len(ensemble)]`.
 *
 * # Safety
 * `ensemble` must be a live handle and `out` must hold `len` values.
 */
enum LfpStatus lfp_ensemble_weights(const struct LfpEnsemble *ensemble, double *out, uintptr_t len);

/**
 * Posterior predictive distribution on `split`, row-major `inputs × classes`.
 * `labels_only` selects the argmax-decoded label average (required for
 * tasks served without logits); `seed` seeds the query stream.
 *
 * # Safety
 * Handles must be live and `out` must hold `len` values.
 */
enum LfpStatus lfp_predict(const struct LfpTask *task,
                           const struct LfpEnsemble *ensemble,
                           enum LfpSplit split,
                           bool labels_only,
                           uint64_t seed,
                           double *out,
                           uintptr_t len);

/**
 * Accuracy, ECE, AURRRC under both scores and the oracle bound for a
 * row-major `rows × classes` predictive table.
 *
 * # Safety
 * `probs` must hold `rows * classes` values, `labels` `rows` values.
 */
enum LfpStatus lfp_metrics(const double *probs,
                           uintptr_t rows,
                           uintptr_t classes,
                           const uint32_t *labels,
                           struct LfpMetrics *out);

/**
 * Oracle AURRRC lower bound for `n` flags (nonzero = bad prediction).
 *
 * # Safety
 * `flags` must hold `n` bytes and `out` be writable.
 */
enum LfpStatus lfp_oracle_lower_bound(const uint8_t *flags, uintptr_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LFPROMPT_H */

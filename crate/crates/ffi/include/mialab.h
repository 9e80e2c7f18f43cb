/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#ifndef MIALAB_H
#define MIALAB_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MialabStatus {
  MIALAB_STATUS_OK = 0,
  MIALAB_STATUS_NULL_POINTER = 1,
  MIALAB_STATUS_INVALID_ARGUMENT = 2,
  MIALAB_STATUS_DIMENSION = 3,
  MIALAB_STATUS_NUMERIC = 4,
  MIALAB_STATUS_CONFIG = 5,
  MIALAB_STATUS_IO = 6,
  MIALAB_STATUS_FORMAT = 7,
  MIALAB_STATUS_DEGENERATE = 8,
  MIALAB_STATUS_UTF8 = 9,
  MIALAB_STATUS_PANIC = 10,
} MialabStatus;

// An experiment config ready to run.
typedef struct MialabExperiment MialabExperiment;

// A trained target classifier.
typedef struct MialabModel MialabModel;

// Results of a finished experiment.
typedef struct MialabSummary MialabSummary;

// Membership attack quality at one threshold.
typedef struct MialabEval {
  double accuracy;
  double tpr;
  double fpr;
  double auc;
  size_t members;
  size_t nonmembers;
} MialabEval;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread, or NULL. Valid until the
// next failing call on the thread.
const char *mialab_last_error(void);

// Library version, statically allocated.
const char *mialab_version(void);

// Frees a string returned by this library. NULL is ignored.
//
// # Safety
// `s` must come from this library and not have been freed.
void mialab_string_free(char *s);

// Loads a model snapshot file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` a valid pointer.
enum MialabStatus mialab_model_load(const char *path, struct MialabModel **out);

// # Safety
// `model` must come from [`mialab_model_load`] and not have been freed.
void mialab_model_free(struct MialabModel *model);

// Input width and number of classes.
//
// # Safety
// All pointers must be valid.
enum MialabStatus mialab_model_dims(const struct MialabModel *model,
                                    size_t *input_dim,
                                    size_t *num_classes);

// Writes the class probabilities of `x` into `probs` (`num_classes`
// values).
//
// # Safety
// `x` must hold `x_len` values and `probs` `probs_len`.
enum MialabStatus mialab_model_forward(const struct MialabModel *model,
                                       const double *x,
                                       size_t x_len,
                                       double *probs,
                                       size_t probs_len);

// Cross-entropy loss of `(x, label)` and the norm of its gradient with
// respect to the last layer's parameters.
//
// # Safety
// `x` must hold `x_len` values; `loss` and `grad_norm` must be valid.
enum MialabStatus mialab_model_loss_grad_norm(const struct MialabModel *model,
                                              const double *x,
                                              size_t x_len,
                                              size_t label,
                                              double *loss,
                                              double *grad_norm);

// Scores `>= threshold` are predicted members; `truth[i] != 0` marks a
// member.
//
// # Safety
// `scores` and `truth` must hold `n` values; `out` must be valid.
enum MialabStatus mialab_evaluate(const double *scores,
                                  const uint8_t *truth,
                                  size_t n,
                                  double threshold,
                                  struct MialabEval *out);

// Parses and validates an experiment config in JSON.
//
// # Safety
// `json` must be NUL-terminated; `out` valid.
enum MialabStatus mialab_experiment_from_json(const char *json, struct MialabExperiment **out);

// Copies a built-in preset.
//
// # Safety
// `name` must be NUL-terminated; `out` valid.
enum MialabStatus mialab_experiment_from_preset(const char *name, struct MialabExperiment **out);

// Number of built-in presets.
size_t mialab_preset_count(void);

// Name of preset `index`, to be freed with [`mialab_string_free`].
//
// # Safety
// `out` must be valid.
enum MialabStatus mialab_preset_name(size_t index, char **out);

// # Safety
// `exp` must be a live handle.
enum MialabStatus mialab_experiment_set_seed(struct MialabExperiment *exp, uint64_t seed);

// Sets the artifact directory; NULL disables writing artifacts.
//
// # Safety
// `exp` must be a live handle; `dir` NULL or NUL-terminated.
enum MialabStatus mialab_experiment_set_output_dir(struct MialabExperiment *exp, const char *dir);

// The config as JSON, to be freed with [`mialab_string_free`].
//
// # Safety
// `exp` must be a live handle; `out` valid.
enum MialabStatus mialab_experiment_to_json(const struct MialabExperiment *exp, char **out);

// Runs the experiment to completion.
//
// # Safety
// `exp` must be a live handle; `out` valid.
enum MialabStatus mialab_experiment_run(const struct MialabExperiment *exp,
                                        struct MialabSummary **out);

// # Safety
// `exp` must come from this library and not have been freed.
void mialab_experiment_free(struct MialabExperiment *exp);

// Number of runs (sweep variants) and attacks in run `run`.
//
// # Safety
// `summary` must be a live handle; outputs valid.
enum MialabStatus mialab_summary_counts(const struct MialabSummary *summary,
                                        size_t run,
                                        size_t *runs,
                                        size_t *attacks);

// Evaluation of attack `attack` in run `run`.
//
// # Safety
// `summary` must be a live handle; `out` valid.
enum MialabStatus mialab_summary_eval(const struct MialabSummary *summary,
                                      size_t run,
                                      size_t attack,
                                      struct MialabEval *out);

// The full summary as JSON, to be freed with [`mialab_string_free`].
//
// # Safety
// `summary` must be a live handle; `out` valid.
enum MialabStatus mialab_summary_json(const struct MialabSummary *summary, char **out);

// # Safety
// `summary` must come from this library and not have been freed.
void mialab_summary_free(struct MialabSummary *summary);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MIALAB_H */

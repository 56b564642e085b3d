#ifndef SAMCAL_H
#define SAMCAL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SamcalStatus {
  SAMCAL_STATUS_OK = 0,
  SAMCAL_STATUS_NULL_POINTER = 1,
  SAMCAL_STATUS_INVALID_ARGUMENT = 2,
  SAMCAL_STATUS_SHAPE = 3,
  SAMCAL_STATUS_PARSE = 4,
  SAMCAL_STATUS_IO = 5,
  SAMCAL_STATUS_DOMAIN = 6,
  SAMCAL_STATUS_NUMERIC = 7,
  SAMCAL_STATUS_PANIC = 8,
} SamcalStatus;

/*
 Trained MLP parameters.
 */
typedef struct SamcalModel SamcalModel;

/*
 Probabilities (and optionally logits) with labels.
 */
typedef struct SamcalPredictions SamcalPredictions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or NULL.

 The pointer stays valid until the next `samcal_` call on the same thread.
 */
const char *samcal_last_error(void);

/*
 Loads a JSON checkpoint.

 # Safety
 `path` must be a nul-terminated string; `out_model` must be writable.
 */
enum SamcalStatus samcal_model_load(const char *path, struct SamcalModel **out_model);

/*
 # Safety
 `model` must come from `samcal_model_load` and not be freed twice. NULL is ignored.
 */
void samcal_model_free(struct SamcalModel *model);

/*
 Input width and class count.

 # Safety
 `model` must be a live handle; the out-pointers must be writable.
 */
enum SamcalStatus samcal_model_dims(const struct SamcalModel *model,
                                    size_t *out_input_dim,
                                    size_t *out_classes);

/*
 Softmax outputs for `rows` feature vectors; `out_probs` holds `rows * classes` doubles.

 # Safety
 `features` must hold `rows * cols` doubles and `out_probs` `out_len` doubles.
 */
enum SamcalStatus samcal_model_predict_proba(const struct SamcalModel *model,
                                             const double *features,
                                             size_t rows,
                                             size_t cols,
                                             double *out_probs,
                                             size_t out_len);

/*
 Prediction set from an `n x k` probability matrix.

 # Safety
 `probs` must hold `n * k` doubles, `labels` `n` entries; `out_predictions` must be writable.
 */
enum SamcalStatus samcal_predictions_from_probs(const double *probs,
                                                const size_t *labels,
                                                size_t n,
                                                size_t k,
                                                struct SamcalPredictions **out_predictions);

/*
 Prediction set from an `n x k` logit matrix (keeps the logits for temperature fitting).

 # Safety
 Same contract as `samcal_predictions_from_probs`.
 */
enum SamcalStatus samcal_predictions_from_logits(const double *logits,
                                                 const size_t *labels,
                                                 size_t n,
                                                 size_t k,
                                                 struct SamcalPredictions **out_predictions);

/*
 # Safety
 `predictions` must come from a `samcal_predictions_*` constructor. NULL is ignored.
 */
void samcal_predictions_free(struct SamcalPredictions *predictions);

/*
 Equal-width binned ECE with `bins` bins.

 # Safety
 `predictions` must be a live handle; `out_value` must be writable.
 */
enum SamcalStatus samcal_ece(const struct SamcalPredictions *predictions,
                             size_t bins,
                             double *out_value);

/*
 Equal-mass binned ECE.

 # Safety
 See `samcal_ece`.
 */
enum SamcalStatus samcal_ada_ece(const struct SamcalPredictions *predictions,
                                 size_t bins,
                                 double *out_value);

/*
 Classwise ECE.

 # Safety
 See `samcal_ece`.
 */
enum SamcalStatus samcal_classwise_ece(const struct SamcalPredictions *predictions,
                                       size_t bins,
                                       double *out_value);

/*
 Mean negative log-likelihood.

 # Safety
 See `samcal_ece`.
 */
enum SamcalStatus samcal_nll(const struct SamcalPredictions *predictions, double *out_value);

/*
 Top-1 accuracy.

 # Safety
 See `samcal_ece`.
 */
enum SamcalStatus samcal_accuracy(const struct SamcalPredictions *predictions, double *out_value);

/*
 AUROC of the confidence at separating correct from wrong predictions.

 # Safety
 See `samcal_ece`.
 */
enum SamcalStatus samcal_auroc_misclassification(const struct SamcalPredictions *predictions,
                                                 double *out_value);

/*
 AUROC of `scores` against 0/1 `positives`; ties count one half.

 # Safety
 `scores` and `positives` must hold `n` entries; `out_value` must be writable.
 */
enum SamcalStatus samcal_auroc(const double *scores,
                               const uint8_t *positives,
                               size_t n,
                               double *out_value);

/*
 Fits a temperature on a logit prediction set by validation NLL.

 # Safety
 See `samcal_ece`.
 */
enum SamcalStatus samcal_fit_temperature(const struct SamcalPredictions *predictions,
                                         double *out_temperature);

/*
 Binary entropy in nats.

 # Safety
 `out_value` must be writable.
 */
enum SamcalStatus samcal_binary_entropy(double p, double *out_value);

/*
 Lower bound on the entropy weight for a perturbation radius and perturbed probability.

 # Safety
 `out_value` must be writable.
 */
enum SamcalStatus samcal_lambda_lower_bound(double rho, double p_tilde, double *out_value);

/*
 Evaluates the single-example entropy inequality at `(p, p_tilde)`.

 # Safety
 The out-pointers must be writable.
 */
enum SamcalStatus samcal_check_theorem1(double p,
                                        double p_tilde,
                                        bool *out_holds,
                                        double *out_slack);

/*
 Mean CSAM outer loss of `n x k` log-probabilities.

 # Safety
 `log_probs` must hold `n * k` doubles, `labels` `n` entries; `out_value` must be writable.
 */
enum SamcalStatus samcal_csam_outer_loss(const double *log_probs,
                                         const size_t *labels,
                                         size_t n,
                                         size_t k,
                                         double gamma,
                                         double *out_value);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SAMCAL_H */

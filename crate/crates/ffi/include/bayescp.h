#ifndef BAYESCP_H
#define BAYESCP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

// Result code of every exported function.
typedef enum BcpStatus {
  BCP_STATUS_OK = 0,
  BCP_STATUS_NULL_POINTER = 1,
  BCP_STATUS_INVALID_ARGUMENT = 2,
  BCP_STATUS_IO = 3,
  BCP_STATUS_PARSE = 4,
  BCP_STATUS_NUMERICAL = 5,
  BCP_STATUS_CHECKPOINT = 6,
  BCP_STATUS_PANIC = 7,
} BcpStatus;

// Nonconformity score used for calibration.
typedef enum BcpScore {
  BCP_SCORE_THR = 0,
  BCP_SCORE_APS = 1,
} BcpScore;

// A fitted conformal threshold.
typedef struct BcpCalibration BcpCalibration;

// A trained posterior loaded from a checkpoint file.
typedef struct BcpPosterior BcpPosterior;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null if none.
// The pointer stays valid until the next failing call on the same thread.
const char *bcp_last_error_message(void);

// Fits a conformal threshold from `n` calibration rows of `k` probabilities.
// `aps` draws its per-example tie-breaking uniforms from `seed`.
//
// # Safety
// `probs` must point to `n * k` doubles, `labels` to `n` values, and `out`
// to writable storage for one handle pointer.
enum BcpStatus bcp_calibrate(const double *probs,
                             const size_t *labels,
                             size_t n,
                             size_t k,
                             double alpha,
                             enum BcpScore score,
                             uint64_t seed,
                             struct BcpCalibration **out);

// Restores a calibration from its JSON form.
//
// # Safety
// `json` must be a NUL-terminated string and `out` writable.
enum BcpStatus bcp_calibration_from_json(const char *json, struct BcpCalibration **out);

// Writes the threshold (`+inf` when the rank exceeds the calibration size).
//
// # Safety
// `cal` must be a live handle and `tau` writable.
enum BcpStatus bcp_calibration_tau(const struct BcpCalibration *cal, double *tau);

// # Safety
// `cal` must be null or a handle not yet freed.
void bcp_calibration_free(struct BcpCalibration *cal);

// Conformal set of one output. `u` is the `aps` tie-breaking uniform in
// `[0, 1]` and is ignored by `thr`. `mask[y]` is set to 1 for members.
//
// # Safety
// `probs` and `mask` must hold `k` elements; `size` may be null.
enum BcpStatus bcp_predict_set(const struct BcpCalibration *cal,
                               const double *probs,
                               size_t k,
                               double u,
                               uint8_t *mask,
                               size_t *size);

// Smallest set whose probability strictly exceeds `1 - alpha`.
//
// # Safety
// `probs` and `mask` must hold `k` elements; `size` may be null.
enum BcpStatus bcp_credible_set(const double *probs,
                                size_t k,
                                double alpha,
                                uint8_t *mask,
                                size_t *size);

// Loads a checkpoint written by the `bayescp` tool.
//
// # Safety
// `path` must be a NUL-terminated UTF-8 path and `out` writable.
enum BcpStatus bcp_posterior_load(const char *path, struct BcpPosterior **out);

// Writes the input dimension and the number of classes.
//
// # Safety
// `post` must be a live handle; either output may be null.
enum BcpStatus bcp_posterior_shape(const struct BcpPosterior *post,
                                   size_t *input_dim,
                                   size_t *num_classes);

// Posterior predictive for `n` rows of `dim` inputs, written row-major into
// `out` (`n * num_classes` doubles). Sampling posteriors draw `n_samples`
// weight samples from `seed`; `temperature` divides the logits.
//
// # Safety
// `x` must hold `n * dim` doubles and `out` `n * num_classes`.
enum BcpStatus bcp_posterior_predict(const struct BcpPosterior *post,
                                     const double *x,
                                     size_t n,
                                     size_t dim,
                                     size_t n_samples,
                                     uint64_t seed,
                                     double temperature,
                                     double *out);

// # Safety
// `post` must be null or a handle not yet freed.
void bcp_posterior_free(struct BcpPosterior *post);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BAYESCP_H */

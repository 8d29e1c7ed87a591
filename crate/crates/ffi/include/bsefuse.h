#ifndef BSEFUSE_H
#define BSEFUSE_H

#pragma once

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible function.
 */
typedef enum BsefuseStatus {
  BSEFUSE_STATUS_OK = 0,
  BSEFUSE_STATUS_NULL_POINTER = 1,
  BSEFUSE_STATUS_INVALID_ARGUMENT = 2,
  BSEFUSE_STATUS_CONFIG = 3,
  BSEFUSE_STATUS_DATA = 4,
  BSEFUSE_STATUS_RUNTIME = 5,
  BSEFUSE_STATUS_CHECKPOINT = 6,
  BSEFUSE_STATUS_PANIC = 7,
} BsefuseStatus;

/**
 * Input plane layout.
 */
typedef enum BsefuseModality {
  /**
   * Grayscale B-mode replicated to 3 channels.
   */
  BSEFUSE_MODALITY_B = 0,
  /**
   * Elastography RGB.
   */
  BSEFUSE_MODALITY_SE = 1,
  /**
   * B-mode plus elastography RGB, 4 channels.
   */
  BSEFUSE_MODALITY_BSE = 2,
} BsefuseModality;

/**
 * Opaque model handle.
 */
typedef struct BsefuseModel BsefuseModel;

/**
 * Binary classification metrics; `has_*` is 0 when the denominator is zero.
 */
typedef struct BsefuseMetrics {
  double accuracy;
  double precision;
  double specificity;
  double sensitivity;
  double f1;
  uint8_t has_precision;
  uint8_t has_specificity;
  uint8_t has_sensitivity;
  uint8_t has_f1;
} BsefuseMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *bsefuse_version(void);

/**
 * Message of the calling thread's last failure; empty after a success.
 * Valid until the next bsefuse call on this thread.
 */
const char *bsefuse_last_error(void);

/**
 * Load a checkpoint written by the `bsefuse` CLI or `bsefuse_model_save`.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string and `out` a valid pointer.
 */
enum BsefuseStatus bsefuse_model_load(const char *path, struct BsefuseModel **out);

/**
 * Build a single backbone (`"alexnet"` or `"resnet18"`) with deterministic
 * seeded weights and a 2-way head, inflated to `channels` inputs.
 *
 * # Safety
 * `arch` must be a valid NUL-terminated string and `out` a valid pointer.
 */
enum BsefuseStatus bsefuse_model_new_seeded(const char *arch,
                                            uint64_t seed,
                                            uint32_t channels,
                                            struct BsefuseModel **out);

/**
 * Release a handle; null is ignored.
 *
 * # Safety
 * `model` must be null or a handle from this library not yet freed.
 */
void bsefuse_model_free(struct BsefuseModel *model);

/**
 * Number of input channels the model expects.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum BsefuseStatus bsefuse_model_input_channels(const struct BsefuseModel *model, uint32_t *out);

/**
 * Save the model as a checkpoint.
 *
 * # Safety
 * `model` must be a live handle and `path` a valid NUL-terminated string.
 */
enum BsefuseStatus bsefuse_model_save(const struct BsefuseModel *model, const char *path);

/**
 * Class probabilities for `n` samples of `[0,1]` planes laid out as
 * N×C×H×W (row-major). Writes `n` rows of `[p_benign, p_malignant]` into
 * `probs`, which must hold `2 * n` doubles.
 *
 * # Safety
 * `data` must hold `n*C*H*W` floats and `probs` `2*n` doubles.
 */
enum BsefuseStatus bsefuse_model_predict(const struct BsefuseModel *model,
                                         const float *data,
                                         size_t n,
                                         size_t height,
                                         size_t width,
                                         enum BsefuseModality plane,
                                         double *probs);

/**
 * Grad-CAM heatmap for one sample. `target` is 0 (benign), 1 (malignant)
 * or -1 for the predicted class. Writes `height * width` normalized values
 * into `heatmap` and the explained class into `class_out`.
 *
 * # Safety
 * `data` must hold `C*H*W` floats, `heatmap` `H*W` floats and `class_out`
 * must be valid.
 */
enum BsefuseStatus bsefuse_model_gradcam(const struct BsefuseModel *model,
                                         const float *data,
                                         size_t height,
                                         size_t width,
                                         enum BsefuseModality plane,
                                         int32_t target,
                                         float *heatmap,
                                         uint32_t *class_out);

/**
 * Patient-level vote over image labels (0 benign, 1 malignant); ties
 * resolve to malignant.
 *
 * # Safety
 * `labels` must hold `n` bytes and `out` be valid.
 */
enum BsefuseStatus bsefuse_patient_vote(const uint8_t *labels, size_t n, uint8_t *out);

/**
 * Metrics of a confusion matrix with malignant as the positive class.
 *
 * # Safety
 * `out` must be valid.
 */
enum BsefuseStatus bsefuse_compute_metrics(uint64_t tp,
                                           uint64_t fp,
                                           uint64_t tn,
                                           uint64_t fn_,
                                           struct BsefuseMetrics *out);

/**
 * Welch two-sample t-test; writes t, degrees of freedom and the two-sided
 * p-value.
 *
 * # Safety
 * `a` and `b` must hold `na` and `nb` doubles; outputs must be valid.
 */
enum BsefuseStatus bsefuse_welch_ttest(const double *a,
                                       size_t na,
                                       const double *b,
                                       size_t nb,
                                       double *t,
                                       double *df,
                                       double *p);

/**
 * Run the command-line interface with `argv[0..argc]` (including the
 * program name) and return its exit code.
 *
 * # Safety
 * `argv` must hold `argc` valid NUL-terminated strings.
 */
int bsefuse_run_command(int argc, const char *const *argv);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BSEFUSE_H */

#ifndef SCINET_H
#define SCINET_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum ScinetStatus {
  SCINET_STATUS_OK = 0,
  SCINET_STATUS_NULL_POINTER = 1,
  SCINET_STATUS_INVALID_ARGUMENT = 2,
  SCINET_STATUS_DIMENSION = 3,
  SCINET_STATUS_CONFIG = 4,
  SCINET_STATUS_IO = 5,
  SCINET_STATUS_CHECKPOINT = 6,
  SCINET_STATUS_NUMERIC = 7,
  SCINET_STATUS_DATA = 8,
  SCINET_STATUS_PANIC = 9,
} ScinetStatus;

/**
 * A loaded model together with the normalization it was trained with.
 */
typedef struct ScinetModel ScinetModel;

/**
 * Forecast error summary filled by [`scinet_metrics`].
 */
typedef struct ScinetMetrics {
  double mae;
  double mse;
  double rmse;
  double mape;
} ScinetMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` as a
 * NUL-terminated string, truncating to `buf_len - 1` bytes. Returns the
 * buffer size needed for the full message, including the terminator.
 *
 * # Safety
 * `buf` must be null or point to `buf_len` writable bytes.
 */
size_t scinet_last_error_message(char *buf, size_t buf_len);

/**
 * Static, NUL-terminated name of a status code.
 */
const char *scinet_status_name(enum ScinetStatus status);

/**
 * Loads the checkpoint directory at `path` and stores a new handle in
 * `*out`. On failure `*out` is set to null.
 *
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string and `out` a valid pointer.
 */
enum ScinetStatus scinet_model_load(const char *path, struct ScinetModel **out);

/**
 * Releases a handle from [`scinet_model_load`]. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void scinet_model_free(struct ScinetModel *model);

/**
 * Look-back length `T`, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t scinet_model_lookback(const struct ScinetModel *model);

/**
 * Forecast horizon, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t scinet_model_horizon(const struct ScinetModel *model);

/**
 * Number of variates, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t scinet_model_variates(const struct ScinetModel *model);

/**
 * Forecasts `batch` windows.
 *
 * `input` holds `batch × variates × lookback` values and `output` receives
 * `batch × variates × horizon`, both row-major with time as the fastest
 * axis. With `original_scale` nonzero, inputs are in data units and are
 * normalized with the checkpoint's statistics, and outputs are mapped back;
 * otherwise both sides are on the normalized scale.
 *
 * # Safety
 * `input` and `output` must point to `input_len` and `output_len` values.
 */
enum ScinetStatus scinet_model_predict(const struct ScinetModel *model,
                                       const double *input,
                                       size_t input_len,
                                       size_t batch,
                                       int original_scale,
                                       double *output,
                                       size_t output_len);

/**
 * Normalized permutation entropy of `series` with embedding dimension `m`
 * and time lag `lag`.
 *
 * # Safety
 * `series` must point to `len` values and `out` be a valid pointer.
 */
enum ScinetStatus scinet_permutation_entropy(const double *series,
                                             size_t len,
                                             size_t m,
                                             size_t lag,
                                             double *out);

/**
 * MAE, MSE, RMSE and MAPE over `len` paired values.
 *
 * # Safety
 * `pred` and `truth` must point to `len` values and `out` be valid.
 */
enum ScinetStatus scinet_metrics(const double *pred,
                                 const double *truth,
                                 size_t len,
                                 struct ScinetMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SCINET_H */

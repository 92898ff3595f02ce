#ifndef HIMAT_H
#define HIMAT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum HimatStatus {
  HIMAT_STATUS_OK = 0,
  HIMAT_STATUS_NULL_POINTER = 1,
  /**
   * Bad string, length or flag passed by the caller.
   */
  HIMAT_STATUS_INVALID_ARGUMENT = 2,
  HIMAT_STATUS_SHAPE_MISMATCH = 3,
  HIMAT_STATUS_INVALID_CONFIG = 4,
  HIMAT_STATUS_IO = 5,
  /**
   * Malformed tensor, image or JSON file.
   */
  HIMAT_STATUS_FORMAT = 6,
  /**
   * NaN/Inf or an out-of-range numeric input.
   */
  HIMAT_STATUS_NUMERIC = 7,
  HIMAT_STATUS_PANIC = 8,
} HimatStatus;

/**
 * A trained run directory: config, checkpoint and codec.
 */
typedef struct HimatRun HimatRun;

/**
 * Dense f64 tensor.
 */
typedef struct HimatTensor HimatTensor;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version, a static NUL-terminated string.
 */
const char *himat_version(void);

/**
 * Message for the last failed call on this thread; empty after a success.
 * Valid until the next call from the same thread.
 */
const char *himat_last_error(void);

/**
 * Copies `len` values of row-major data into a new tensor of the given shape.
 *
 * # Safety
 * `shape` must point to `rank` values and `data` to `len` values.
 */
enum HimatStatus himat_tensor_new(const size_t *shape,
                                  size_t rank,
                                  const double *data,
                                  size_t len,
                                  struct HimatTensor **out);

/**
 * # Safety
 * `t` must come from this library and not be used afterwards. Null is ignored.
 */
void himat_tensor_free(struct HimatTensor *t);

/**
 * Rank of `t`, 0 for null.
 *
 * # Safety
 * `t` must be null or a live tensor handle.
 */
size_t himat_tensor_rank(const struct HimatTensor *t);

/**
 * Element count of `t`, 0 for null.
 *
 * # Safety
 * `t` must be null or a live tensor handle.
 */
size_t himat_tensor_numel(const struct HimatTensor *t);

/**
 * Writes the dims into `out`, which holds `cap` values.
 *
 * # Safety
 * `t` must be a live tensor handle and `out` must hold `cap` values.
 */
enum HimatStatus himat_tensor_shape(const struct HimatTensor *t, size_t *out, size_t cap);

/**
 * Copies the row-major values into `out`; `len` must equal the element count.
 *
 * # Safety
 * `t` must be a live tensor handle and `out` must hold `len` values.
 */
enum HimatStatus himat_tensor_copy_data(const struct HimatTensor *t, double *out, size_t len);

/**
 * # Safety
 * `path` must be a NUL-terminated string.
 */
enum HimatStatus himat_tensor_read_himt(const char *path, struct HimatTensor **out);

/**
 * Saves `t` in HIMT format, as f64 when `double_precision` is nonzero and f32 otherwise.
 *
 * # Safety
 * `t` must be a live tensor handle and `path` a NUL-terminated string.
 */
enum HimatStatus himat_tensor_write_himt(const struct HimatTensor *t,
                                         const char *path,
                                         int32_t double_precision);

/**
 * Weighted SWT loss with the default subband weights on `[M, H, W, C]` or
 * `[B, M, H, W, C]` tensors.
 *
 * # Safety
 * Handles must be live, `basis` NUL-terminated, `out` writable.
 */
enum HimatStatus himat_swt_loss(const struct HimatTensor *pred,
                                const struct HimatTensor *target,
                                const char *basis,
                                size_t levels,
                                double *out);

/**
 * PSNR in dB; `+inf` for identical inputs.
 *
 * # Safety
 * Handles must be live and `out` writable.
 */
enum HimatStatus himat_psnr(const struct HimatTensor *a,
                            const struct HimatTensor *b,
                            double peak,
                            double *out);

/**
 * GLCM contrast of an `[H, W]` image in `[0, 1]` with the default offsets.
 *
 * # Safety
 * `img` must be live and `out` writable.
 */
enum HimatStatus himat_glcm_score(const struct HimatTensor *img, size_t levels, double *out);

/**
 * Loads a directory written by `himat train`.
 *
 * # Safety
 * `dir` must be a NUL-terminated string.
 */
enum HimatStatus himat_run_load(const char *dir, struct HimatRun **out);

/**
 * # Safety
 * `run` must come from [`himat_run_load`] and not be used afterwards. Null is ignored.
 */
void himat_run_free(struct HimatRun *run);

/**
 * Samples one decoded map stack `[3, H, W, 3]` in `[0, 1]`. `steps == 0`
 * uses the configured count; nonzero `tileable` turns on noise rolling.
 *
 * # Safety
 * `run` must be live and `out` writable.
 */
enum HimatStatus himat_run_generate(const struct HimatRun *run,
                                    size_t prompt_id,
                                    size_t steps,
                                    uint64_t seed,
                                    int32_t tileable,
                                    struct HimatTensor **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HIMAT_H */

#ifndef INFOTOK_H
#define INFOTOK_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define INFOTOK_DEFAULT_EPSILON 0.05

#define INFOTOK_DEFAULT_ALPHA 0.3

enum InfotokStatus
#ifdef __cplusplus
  : int32_t
#endif // __cplusplus
 {
  INFOTOK_STATUS_OK = 0,
  INFOTOK_STATUS_NULL_POINTER = 1,
  INFOTOK_STATUS_INVALID_ARGUMENT = 2,
  INFOTOK_STATUS_IO = 3,
  INFOTOK_STATUS_PARSE = 4,
  INFOTOK_STATUS_UNSUPPORTED_FORMAT = 5,
  INFOTOK_STATUS_INVALID_LAYOUT = 6,
  INFOTOK_STATUS_CONFIG = 7,
  INFOTOK_STATUS_CAPACITY = 8,
  INFOTOK_STATUS_DOMAIN = 9,
  INFOTOK_STATUS_ESTIMATION = 10,
  INFOTOK_STATUS_MODEL_MISMATCH = 11,
  INFOTOK_STATUS_TRAINING_DIVERGED = 12,
  INFOTOK_STATUS_ORACLE_TOO_LARGE = 13,
  INFOTOK_STATUS_PANIC = 14,
};
#ifndef __cplusplus
typedef int32_t InfotokStatus;
#endif // __cplusplus

/**
 * Opaque handle to a loaded checkpoint.
 */
typedef struct InfotokModel InfotokModel;

/**
 * Shape of the images a model accepts.
 */
typedef struct InfotokModelInfo {
  size_t height;
  size_t width;
  size_t channels;
  size_t num_global;
  size_t patch_count;
  size_t codebook_size;
  uint32_t checksum;
} InfotokModelInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *infotok_last_error(void);

/**
 * Loads a checkpoint file. On success `*out` owns a handle to be released
 * with [`infotok_model_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
InfotokStatus infotok_model_load(const char *path, struct InfotokModel **out);

/**
 * Parses a checkpoint held in memory.
 *
 * # Safety
 * `bytes` must point to `len` readable bytes and `out` must be writable.
 */
InfotokStatus infotok_model_from_bytes(const uint8_t *bytes, size_t len, struct InfotokModel **out);

/**
 * Releases a handle from [`infotok_model_load`]. Null is ignored.
 *
 * # Safety
 * `handle` must be null or a live handle that is not used afterwards.
 */
void infotok_model_free(struct InfotokModel *handle);

/**
 * # Safety
 * `handle` must be a live handle and `out` writable.
 */
InfotokStatus infotok_model_info(const struct InfotokModel *handle, struct InfotokModelInfo *out);

/**
 * Encodes an image with entropy-driven token filtering. `*out_bytes`
 * receives a serialized token stream to be released with
 * [`infotok_bytes_free`].
 *
 * # Safety
 * `pixels` must point to `len` doubles; `out_bytes` and `out_len` must be
 * writable.
 */
InfotokStatus infotok_tokenize(const struct InfotokModel *handle,
                               const double *pixels,
                               size_t len,
                               double epsilon,
                               double alpha,
                               uint8_t **out_bytes,
                               size_t *out_len);

/**
 * Decodes a serialized token stream. `*out_pixels` receives
 * `height × width × channels` doubles to be released with
 * [`infotok_pixels_free`].
 *
 * # Safety
 * `bytes` must point to `len` readable bytes; `out_pixels` and `out_len`
 * must be writable.
 */
InfotokStatus infotok_detokenize(const struct InfotokModel *handle,
                                 const uint8_t *bytes,
                                 size_t len,
                                 double **out_pixels,
                                 size_t *out_len);

/**
 * # Safety
 * `data`/`len` must come from [`infotok_tokenize`], or `data` be null.
 */
void infotok_bytes_free(uint8_t *data, size_t len);

/**
 * # Safety
 * `data`/`len` must come from [`infotok_detokenize`], or `data` be null.
 */
void infotok_pixels_free(double *data, size_t len);

/**
 * Gaussian rate-distortion function in bits.
 *
 * # Safety
 * `out` must be writable.
 */
InfotokStatus infotok_rate_distortion(double sigma2, double d0, size_t pixel_count, double *out);

/**
 * Bits per pixel of `n` tokens from a codebook of `k` entries.
 *
 * # Safety
 * `out` must be writable.
 */
InfotokStatus infotok_code_rate(size_t n,
                                size_t k,
                                size_t height,
                                size_t width,
                                size_t channels,
                                double *out);

/**
 * Distortion bound `d_min · 2^(−2·delta_r)`.
 *
 * # Safety
 * `out` must be writable.
 */
InfotokStatus infotok_distortion_bound(double d_min, double delta_r, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* INFOTOK_H */

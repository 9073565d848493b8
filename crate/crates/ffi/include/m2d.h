#ifndef M2D_H
#define M2D_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum M2dStatus {
  M2D_STATUS_OK = 0,
  M2D_STATUS_NULL_POINTER = 1,
  M2D_STATUS_INVALID_ARGUMENT = 2,
  M2D_STATUS_CONFIG_ERROR = 3,
  M2D_STATUS_DATA_ERROR = 4,
  M2D_STATUS_IO_ERROR = 5,
  M2D_STATUS_CORRUPT_CHECKPOINT = 6,
  M2D_STATUS_BUFFER_TOO_SMALL = 7,
  M2D_STATUS_PANIC = 8,
} M2dStatus;

/**
 * Loaded encoder with its frontend settings. Opaque to C.
 */
typedef struct M2dModel M2dModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * NUL-terminated version string with static lifetime.
 */
const char *m2d_version(void);

/**
 * Copies the calling thread's last error message into `buf` (truncated,
 * always NUL-terminated when `capacity > 0`) and returns its full length.
 *
 * # Safety
 * `buf` must be valid for `capacity` bytes or null.
 */
size_t m2d_last_error(char *buf, size_t capacity);

/**
 * Loads the online encoder of a checkpoint. The model must be released
 * with [`m2d_model_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string; `out` must be writable.
 */
enum M2dStatus m2d_model_load(const char *path, struct M2dModel **out);

/**
 * # Safety
 * `model` must come from [`m2d_model_load`] and not be used afterwards. Null is ignored.
 */
void m2d_model_free(struct M2dModel *model);

/**
 * Overrides the standardization statistics (default: from the checkpoint
 * config, AudioSet values when it says `estimate`).
 *
 * # Safety
 * `model` must be a live handle.
 */
enum M2dStatus m2d_model_set_stats(struct M2dModel *model, double mean, double std);

/**
 * Width of one frame feature (`N_F · D`) and the model's input length in frames.
 *
 * # Safety
 * `model` must be a live handle; out-pointers may be null.
 */
enum M2dStatus m2d_model_info(const struct M2dModel *model,
                              size_t *feature_dim,
                              size_t *clip_frames,
                              uint32_t *sample_rate_hz);

/**
 * Frame features of a waveform, row-major `frames × feature_dim`, written
 * to `out`. `n_frames` receives the frame count and `needed` the element count.
 *
 * # Safety
 * `wave` must hold `n_samples` values and `out` `capacity` values.
 */
enum M2dStatus m2d_extract_frames(const struct M2dModel *model,
                                  const double *wave,
                                  size_t n_samples,
                                  double *out,
                                  size_t capacity,
                                  size_t *n_frames,
                                  size_t *needed);

/**
 * Temporal mean of the frame features: `feature_dim` values.
 *
 * # Safety
 * `wave` must hold `n_samples` values and `out` `capacity` values.
 */
enum M2dStatus m2d_extract_clip(const struct M2dModel *model,
                                const double *wave,
                                size_t n_samples,
                                double *out,
                                size_t capacity,
                                size_t *needed);

/**
 * Log-mel spectrogram with the default frontend (16 kHz, 25 ms / 10 ms,
 * 80 bands, 50–8000 Hz), row-major `80 × n_frames`.
 *
 * # Safety
 * `wave` must hold `n_samples` values and `out` `capacity` values.
 */
enum M2dStatus m2d_logmel(const double *wave,
                          size_t n_samples,
                          double *out,
                          size_t capacity,
                          size_t *n_frames,
                          size_t *needed);

/**
 * Mean of `2 − 2·cos` over matching rows of two `rows × dim` matrices.
 *
 * # Safety
 * `pred` and `target` must each hold `rows * dim` values; `loss` must be writable.
 */
enum M2dStatus m2d_loss_value(const double *pred,
                              const double *target,
                              size_t rows,
                              size_t dim,
                              double *loss);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* M2D_H */

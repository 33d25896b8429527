#ifndef CRACKRES_H
#define CRACKRES_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every call.
 */
typedef enum CrStatus {
  CR_STATUS_OK = 0,
  CR_STATUS_NULL_POINTER = 1,
  CR_STATUS_INVALID_ARGUMENT = 2,
  CR_STATUS_CONFIG = 3,
  CR_STATUS_STATE = 4,
  CR_STATUS_DATA = 5,
  CR_STATUS_NON_FINITE = 6,
  CR_STATUS_IO = 7,
  CR_STATUS_PANIC = 8,
} CrStatus;

/**
 * Planar image with samples in `[0, 1]`.
 */
typedef struct CrImage CrImage;

/**
 * Both networks plus the configuration they were built with.
 */
typedef struct CrModel CrModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after success.
 * Valid until the next call on the same thread.
 */
const char *cr_last_error(void);

/**
 * Library version as a static string.
 */
const char *cr_version(void);

/**
 * Number of taps of a blur kernel (21 x 21).
 */
uintptr_t cr_kernel_len(void);

/**
 * Copies `height * width * channels` planar samples into a new image.
 *
 * # Safety
 * `data` must point to that many readable doubles; `out` must be writable.
 */
enum CrStatus cr_image_new(uintptr_t height,
                           uintptr_t width,
                           uintptr_t channels,
                           const double *data,
                           struct CrImage **out);

/**
 * Reads a PNG file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum CrStatus cr_image_read_png(const char *path, struct CrImage **out);

/**
 * Writes a PNG file at 8 or 16 bits per sample.
 *
 * # Safety
 * `image` must be a live handle and `path` a NUL-terminated string.
 */
enum CrStatus cr_image_write_png(const struct CrImage *image, const char *path, bool sixteen_bit);

/**
 * Height, width and channel count of an image.
 *
 * # Safety
 * `image` must be a live handle; each out pointer may be null.
 */
enum CrStatus cr_image_dims(const struct CrImage *image,
                            uintptr_t *height,
                            uintptr_t *width,
                            uintptr_t *channels);

/**
 * Planar samples of an image; valid while the handle lives.
 *
 * # Safety
 * `image` must be a live handle or null (which yields null).
 */
const double *cr_image_data(const struct CrImage *image);

/**
 * # Safety
 * `image` must come from this library and not be freed twice.
 */
void cr_image_free(struct CrImage *image);

/**
 * Blurs with an anisotropic Gaussian and downsamples by 4. The kernel
 * used is written to `kernel_out` when it is not null.
 *
 * # Safety
 * `hr` must be a live handle, `out` writable, and `kernel_out` either
 * null or room for `cr_kernel_len()` doubles.
 */
enum CrStatus cr_degrade(const struct CrImage *hr,
                         double sigma_a,
                         double sigma_b,
                         double theta,
                         struct CrImage **out,
                         double *kernel_out);

/**
 * Freshly initialized networks for a config (null path: defaults).
 *
 * # Safety
 * `config_path` must be null or a NUL-terminated string; `out` writable.
 */
enum CrStatus cr_model_new(const char *config_path, struct CrModel **out);

/**
 * Loads a training checkpoint. The checkpoint must have been written
 * under the same config (hash check).
 *
 * # Safety
 * `config_path` may be null; `checkpoint_dir` must be a NUL-terminated
 * string; `out` writable.
 */
enum CrStatus cr_model_load(const char *config_path,
                            const char *checkpoint_dir,
                            struct CrModel **out);

/**
 * # Safety
 * `model` must come from this library and not be freed twice.
 */
void cr_model_free(struct CrModel *model);

/**
 * Writes the 64-hex config hash of a model into `buf` (at least 65 bytes).
 *
 * # Safety
 * `model` must be a live handle and `buf` writable for `len` bytes.
 */
enum CrStatus cr_model_config_hash(const struct CrModel *model, char *buf, uintptr_t len);

/**
 * x4 super-resolution and crack probability of an LR image. `out_prob`
 * is a one-channel image; `kernel_out` (nullable) receives the estimated
 * blur kernel.
 *
 * # Safety
 * Handles must be live; out pointers writable; `kernel_out` null or
 * room for `cr_kernel_len()` doubles.
 */
enum CrStatus cr_model_predict(const struct CrModel *model,
                               const struct CrImage *lr,
                               struct CrImage **out_sr,
                               struct CrImage **out_prob,
                               double *kernel_out);

/**
 * IoU of two row-major masks (non-zero bytes are foreground).
 *
 * # Safety
 * `pred` and `gt` must hold `height * width` bytes; `out` writable.
 */
enum CrStatus cr_iou(const uint8_t *pred,
                     const uint8_t *gt,
                     uintptr_t height,
                     uintptr_t width,
                     double *out);

/**
 * 95th-percentile Hausdorff distance of two row-major masks, in pixels.
 *
 * # Safety
 * As [`cr_iou`].
 */
enum CrStatus cr_hd95(const uint8_t *pred,
                      const uint8_t *gt,
                      uintptr_t height,
                      uintptr_t width,
                      double *out);

/**
 * PSNR in dB between two images of equal shape (peak 1, capped at 100).
 *
 * # Safety
 * Handles must be live; `out` writable.
 */
enum CrStatus cr_psnr(const struct CrImage *a, const struct CrImage *b, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CRACKRES_H */

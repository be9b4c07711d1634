#ifndef ATTNCALIB_H
#define ATTNCALIB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum AcStatus {
  AC_STATUS_OK = 0,
  AC_STATUS_NULL_POINTER = 1,
  AC_STATUS_INVALID_ARGUMENT = 2,
  AC_STATUS_IO = 3,
  AC_STATUS_FORMAT = 4,
  AC_STATUS_RUNTIME = 5,
  AC_STATUS_PANIC = 6,
} AcStatus;

// Polling answer written by [`ac_poll`].
typedef enum AcAnswer {
  AC_ANSWER_NO = 0,
  AC_ANSWER_YES = 1,
  AC_ANSWER_UNPARSED = 2,
} AcAnswer;

// A calibration bound to the model it was built for.
typedef struct AcCalibration AcCalibration;

// A loaded or freshly initialised backbone.
typedef struct AcModel AcModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *ac_version(void);

// Copies the calling thread's last error message into `buf` (truncated and
// always NUL-terminated when `len > 0`). Returns the length the full
// message needs, terminator included.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
uintptr_t ac_last_error(char *buf, uintptr_t len);

// Loads a backbone checkpoint.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum AcStatus ac_model_load(const char *path, struct AcModel **out);

// Initialises an untrained backbone with the default architecture.
//
// # Safety
// `out` must be writable.
enum AcStatus ac_model_init(uint64_t seed, struct AcModel **out);

// # Safety
// `model` must be a live handle; `path` a NUL-terminated string.
enum AcStatus ac_model_save(const struct AcModel *model, const char *path);

// Writes the patch grid size, patch width and layer count. Any output
// pointer may be null.
//
// # Safety
// `model` must be a live handle; non-null outputs must be writable.
enum AcStatus ac_model_shape(const struct AcModel *model,
                             uintptr_t *grid_h,
                             uintptr_t *grid_w,
                             uintptr_t *patch_dim,
                             uintptr_t *n_layers);

// # Safety
// `model` must be null or a handle from this library not yet freed.
void ac_model_free(struct AcModel *model);

// Estimates a uniform calibration for every layer with the default
// estimation input and prompt.
//
// # Safety
// `model` must be a live handle; `out` must be writable.
enum AcStatus ac_uac_estimate(const struct AcModel *model, struct AcCalibration **out);

// Loads a saved calibration matrix for `model`.
//
// # Safety
// `model` must be a live handle, `path` a NUL-terminated string and `out`
// writable.
enum AcStatus ac_uac_load(const struct AcModel *model,
                          const char *path,
                          struct AcCalibration **out);

// Loads a trained dynamic calibration module for `model`.
//
// # Safety
// As for [`ac_uac_load`].
enum AcStatus ac_dac_load(const struct AcModel *model,
                          const char *path,
                          struct AcCalibration **out);

// # Safety
// `calib` must be null or a handle from this library not yet freed.
void ac_calibration_free(struct AcCalibration *calib);

// Blank-image attention probe at one layer with the default input and
// prompt. Writes the `grid_h * grid_w` raster heatmap (summing to 1) into
// `heatmap` and its KL divergence from uniform into `kl`. `calib` may be
// null; `heatmap` may be null when `heatmap_len` is 0.
//
// # Safety
// Handles must be live; `heatmap` must hold `heatmap_len` doubles and `kl`
// must be writable.
enum AcStatus ac_probe(const struct AcModel *model,
                       const struct AcCalibration *calib,
                       uintptr_t layer,
                       double *heatmap,
                       uintptr_t heatmap_len,
                       double *kl);

// Asks "is there a <class> ?" about a patch image and greedily decodes the
// answer. `patches` is the row-major `[grid_h * grid_w, patch_dim]` image.
//
// # Safety
// Handles must be live; `patches` must hold `patches_len` doubles and
// `answer` must be writable.
enum AcStatus ac_poll(const struct AcModel *model,
                      const struct AcCalibration *calib,
                      const double *patches,
                      uintptr_t patches_len,
                      uintptr_t class_,
                      enum AcAnswer *answer);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ATTNCALIB_H */

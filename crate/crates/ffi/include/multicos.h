#ifndef MULTICOS_H
#define MULTICOS_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum McStatus {
  MC_STATUS_OK = 0,
  MC_STATUS_NULL_POINTER = 1,
  MC_STATUS_INVALID_ARGUMENT = 2,
  MC_STATUS_SHAPE_MISMATCH = 3,
  MC_STATUS_IO = 4,
  MC_STATUS_MALFORMED_FILE = 5,
  MC_STATUS_CONFIG = 6,
  MC_STATUS_MISSING_MODALITY = 7,
  MC_STATUS_INTERNAL = 8,
} McStatus;

/**
 * A segmentation model together with the run configuration it came from.
 */
typedef struct McModel McModel;

/**
 * Dataset-style metrics of one prediction against a binary mask.
 */
typedef struct McMetrics {
  double mae;
  double f_max;
  double f_mean;
  double f_adaptive;
  double e_max;
  double e_mean;
  double s;
} McMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Loads a model from a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum McStatus mc_model_load(const char *path, struct McModel **out);

/**
 * Builds a freshly initialized model from a named profile (`toy`,
 * `compact` or `paper`).
 *
 * # Safety
 * `profile` must be a NUL-terminated string and `out` a valid pointer.
 */
enum McStatus mc_model_new(const char *profile, uint64_t seed, struct McModel **out);

/**
 * Releases a model. Null is accepted.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void mc_model_free(struct McModel *model);

/**
 * Writes the model's weights to a checkpoint file.
 *
 * # Safety
 * `model` must be a live handle and `path` a NUL-terminated string.
 */
enum McStatus mc_model_save(const struct McModel *model, const char *path);

/**
 * Side length the model works at; inputs of other sizes are resampled.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum McStatus mc_model_image_size(const struct McModel *model, size_t *out);

/**
 * Whether the model can run without an auxiliary image.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum McStatus mc_model_accepts_missing_aux(const struct McModel *model, bool *out);

/**
 * Foreground probabilities for one image.
 *
 * `rgb` holds `3 * height * width` values in `[0, 1]`, planar
 * channel-major. `aux` holds `height * width` values or is null to let the
 * knowledge learner synthesize it. `out` receives `height * width`
 * probabilities.
 *
 * # Safety
 * All non-null buffers must have the stated lengths.
 */
enum McStatus mc_model_predict(const struct McModel *model,
                               const double *rgb,
                               const double *aux,
                               size_t height,
                               size_t width,
                               double *out);

/**
 * Scores a prediction in `[0, 1]` against a binary mask, both
 * `height * width` row-major.
 *
 * # Safety
 * Both buffers must hold `height * width` values and `out` must be valid.
 */
enum McStatus mc_metrics(const double *pred,
                         const double *gt,
                         size_t height,
                         size_t width,
                         struct McMetrics *out);

/**
 * Message of the last failed call on this thread; empty after a success.
 * Valid until the next call into the library from the same thread.
 */
const char *mc_last_error(void);

/**
 * Static description of a status code; unknown codes are reported as such.
 */
const char *mc_status_str(int32_t status);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MULTICOS_H */

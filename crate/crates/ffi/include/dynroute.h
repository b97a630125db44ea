#ifndef DYNROUTE_H
#define DYNROUTE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by every entry point.
 */
typedef enum DrStatus {
  DR_STATUS_OK = 0,
  DR_STATUS_NULL_POINTER = 1,
  DR_STATUS_INVALID_ARGUMENT = 2,
  DR_STATUS_SHAPE_MISMATCH = 3,
  DR_STATUS_NUMERICAL = 4,
  DR_STATUS_IO = 5,
  DR_STATUS_FORMAT = 6,
  DR_STATUS_CONFIG = 7,
  /**
   * The quantity is not defined for this input (e.g. AUC of one class).
   */
  DR_STATUS_UNDEFINED = 8,
  DR_STATUS_INTERNAL = 9,
} DrStatus;

/**
 * Opaque handle to a loaded network.
 */
typedef struct DrNetwork DrNetwork;

/**
 * Box in pixel coordinates covering columns `x..x+w` and rows `y..y+h`.
 */
typedef struct DrBox {
  size_t x;
  size_t y;
  size_t w;
  size_t h;
} DrBox;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent failure on this thread; empty after
 * a success. The pointer stays valid until the next call on this thread.
 */
const char *dr_last_error_message(void);

/**
 * Library version as a NUL-terminated string with static lifetime.
 */
const char *dr_version(void);

/**
 * Loads a checkpoint written by `dynroute train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum DrStatus dr_network_load(const char *path, struct DrNetwork **out);

/**
 * Releases a handle from [`dr_network_load`]; null is ignored.
 *
 * # Safety
 * `handle` must come from [`dr_network_load`] and not be used afterwards.
 */
void dr_network_free(struct DrNetwork *handle);

/**
 * Side length of the square input images.
 *
 * # Safety
 * `handle` must be a live network handle; `out` a valid pointer.
 */
enum DrStatus dr_network_input_size(const struct DrNetwork *handle, size_t *out);

/**
 * Number of classes scored by the network.
 *
 * # Safety
 * `handle` must be a live network handle; `out` a valid pointer.
 */
enum DrStatus dr_network_n_classes(const struct DrNetwork *handle, size_t *out);

/**
 * Class scores (capsule norms) for `n_images` images; writes
 * `n_images * n_classes` values to `scores`.
 *
 * # Safety
 * `pixels` must hold `n_images * size * size` values and `scores`
 * room for `n_images * n_classes`.
 */
enum DrStatus dr_network_predict(const struct DrNetwork *handle,
                                 const double *pixels,
                                 size_t n_images,
                                 double *scores);

/**
 * Grad-CAM of one image for `class`, upsampled to the input size and
 * normalized to [0, 1]. `detected` is set to 1 and `bbox` filled when a
 * region exceeds `tau`, otherwise `detected` is 0.
 *
 * # Safety
 * `pixels` and `heatmap` must each hold `size * size` values; `bbox`
 * and `detected` must be valid pointers.
 */
enum DrStatus dr_network_gradcam(const struct DrNetwork *handle,
                                 const double *pixels,
                                 size_t class_,
                                 double tau,
                                 double *heatmap,
                                 struct DrBox *bbox,
                                 uint8_t *detected);

/**
 * Gram-matrix routing of a 1x1 capsule layer. `gram` is `n_in x n_in`,
 * `weights` is `n_in x n_out`, both row-major. Writes the final couplings
 * (`n_in x n_out`) and output norms (`n_out`).
 *
 * # Safety
 * All pointers must reference buffers of the stated sizes.
 */
enum DrStatus dr_route_conv1x1_kernel(const double *gram,
                                      size_t n_in,
                                      const double *weights,
                                      size_t n_out,
                                      size_t iterations,
                                      double *couplings,
                                      double *norms);

/**
 * Area under the ROC curve for binary `labels` (nonzero = positive), ties
 * counted one half. Returns `DR_STATUS_UNDEFINED` unless both classes occur.
 *
 * # Safety
 * `scores` and `labels` must hold `n` values; `out` must be valid.
 */
enum DrStatus dr_auc(const double *scores, const uint8_t *labels, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DYNROUTE_H */

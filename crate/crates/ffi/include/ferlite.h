#ifndef FERLITE_H
#define FERLITE_H

/* Generated by cbindgen from ferlite-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
enum FerliteStatus
#ifdef __cplusplus
  : uint32_t
#endif // __cplusplus
 {
  FERLITE_STATUS_OK = 0,
  // A required pointer argument was null.
  FERLITE_STATUS_NULL_ARGUMENT = 1,
  // The configuration is rejected (e.g. fewer than two classes).
  FERLITE_STATUS_INVALID_CONFIG = 2,
  // Reading or decoding input data failed.
  FERLITE_STATUS_DATA_ERROR = 3,
  // Loading or saving a checkpoint failed.
  FERLITE_STATUS_CHECKPOINT_ERROR = 4,
  // An input had the wrong shape or size.
  FERLITE_STATUS_SHAPE_ERROR = 5,
  // An output buffer is too small for the result.
  FERLITE_STATUS_BUFFER_TOO_SMALL = 6,
  // A string argument was not valid UTF-8.
  FERLITE_STATUS_UTF8_ERROR = 7,
  // An internal invariant failed; the handle is still valid.
  FERLITE_STATUS_INTERNAL_PANIC = 8,
};
#ifndef __cplusplus
typedef uint32_t FerliteStatus;
#endif // __cplusplus

// An opaque trained or initialized model.
typedef struct FerliteModel FerliteModel;

// Architecture switches, mirroring the library defaults.
typedef struct FerliteConfig {
  // Number of expression classes (>= 2).
  uint32_t num_classes;
  // Width of each head's feature vector (>= 1).
  uint32_t feature_dim;
  // Enable channel attention.
  bool eca_enabled;
  // Apply one attention block before partitioning instead of one per
  // branch after it.
  bool eca_before_partition;
  // Keep the whole-map head.
  bool global_head;
  // Keep the four local patch heads.
  bool ensemble;
} FerliteConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// The default configuration: 8 classes, attention per branch, all five
// heads.
struct FerliteConfig ferlite_config_default(void);

// Builds a freshly initialized model. On success `*out` owns the handle.
//
// # Safety
// `config` and `out` must be valid pointers.
FerliteStatus ferlite_model_build(const struct FerliteConfig *config,
                                  uint64_t seed,
                                  struct FerliteModel **out);

// Loads a checkpoint that must cover exactly the parameters of `config`.
//
// # Safety
// `config`, `path`, and `out` must be valid pointers; `path` is a
// NUL-terminated UTF-8 string.
FerliteStatus ferlite_model_load(const struct FerliteConfig *config,
                                 const char *path,
                                 struct FerliteModel **out);

// Writes the model's parameters as a checkpoint file.
//
// # Safety
// `model` must be a live handle; `path` a valid NUL-terminated string.
FerliteStatus ferlite_model_save(const struct FerliteModel *model, const char *path);

// Total learnable parameter count of the handle's architecture.
//
// # Safety
// `model` and `out_total` must be valid pointers.
FerliteStatus ferlite_model_param_count(const struct FerliteModel *model, uint64_t *out_total);

// Number of classes the handle predicts (the required `probs` length for
// [`ferlite_predict`]).
//
// # Safety
// `model` and `out_classes` must be valid pointers.
FerliteStatus ferlite_model_num_classes(const struct FerliteModel *model, uint32_t *out_classes);

// Class probabilities for one preprocessed square grayscale image.
//
// `pixels` holds `side * side` floats in [-1, 1], row-major, where `side`
// is a positive multiple of 8 (128 for the native input; see
// [`ferlite_preprocess_image`]). With `mirror`, the prediction is averaged
// with the horizontally flipped input. `probs` receives exactly
// `num_classes` values summing to 1.
//
// # Safety
// `model`, `pixels`, and `probs` must be valid for the given lengths.
FerliteStatus ferlite_predict(const struct FerliteModel *model,
                              const float *pixels,
                              size_t pixel_count,
                              bool mirror,
                              float *probs,
                              size_t probs_len);

// Decodes an image file and preprocesses it to the network's native input:
// grayscale, bilinearly resized to 128x128, normalized to [-1, 1]. `out`
// receives `128 * 128` floats.
//
// # Safety
// `path` must be a valid NUL-terminated string and `out` valid for
// `out_len` floats.
FerliteStatus ferlite_preprocess_image(const char *path, float *out, size_t out_len);

// Releases a handle. Null is a no-op.
//
// # Safety
// `model` must come from this library and not have been freed before.
void ferlite_model_free(struct FerliteModel *model);

// The message of this thread's most recent failure. The pointer stays
// valid until the next failing call on the same thread; never free it.
const char *ferlite_last_error_message(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FERLITE_H */

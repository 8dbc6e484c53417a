#ifndef TRANSNEXT_H
#define TRANSNEXT_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TnxtStatus {
  TNXT_STATUS_OK = 0,
  TNXT_STATUS_NULL_ARGUMENT = 1,
  TNXT_STATUS_INVALID_STRING = 2,
  TNXT_STATUS_SHAPE_ERROR = 3,
  TNXT_STATUS_CONFIG_ERROR = 4,
  TNXT_STATUS_DOMAIN_ERROR = 5,
  TNXT_STATUS_ARCHIVE_ERROR = 6,
  TNXT_STATUS_IO_ERROR = 7,
  TNXT_STATUS_BUFFER_TOO_SMALL = 8,
  TNXT_STATUS_PANIC = 9,
} TnxtStatus;

typedef enum TnxtMode {
  TNXT_MODE_NORMAL = 0,
  TNXT_MODE_LINEAR = 1,
} TnxtMode;

typedef enum TnxtMacConvention {
  TNXT_MAC_CONVENTION_MAC1 = 0,
  TNXT_MAC_CONVENTION_MAC2 = 1,
} TnxtMacConvention;

/**
 * Opaque model handle.
 */
typedef struct TnxtModel TnxtModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Builds a stock variant (`micro`, `tiny`, `small`, `base`) with seeded
 * weights.
 *
 * # Safety
 * `variant` must be a NUL-terminated string; `out` must be valid for writes.
 */
enum TnxtStatus tnxt_model_new_stock(const char *variant, uint64_t seed, struct TnxtModel **out);

/**
 * Builds a model from a `key=value` config file with seeded weights.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be valid for writes.
 */
enum TnxtStatus tnxt_model_from_config_file(const char *path,
                                            uint64_t seed,
                                            struct TnxtModel **out);

/**
 * Loads f32 weights for `config`, a stock variant name or config file.
 *
 * # Safety
 * Both strings must be NUL-terminated; `out` must be valid for writes.
 */
enum TnxtStatus tnxt_model_load(const char *config, const char *weights, struct TnxtModel **out);

/**
 * # Safety
 * `model` must be a live handle; `path` a NUL-terminated string.
 */
enum TnxtStatus tnxt_model_save(const struct TnxtModel *model, const char *path);

/**
 * # Safety
 * `model` must be a live handle; `out` valid for writes.
 */
enum TnxtStatus tnxt_model_param_count(const struct TnxtModel *model, uint64_t *out);

/**
 * # Safety
 * `model` must be a live handle; `out` valid for writes.
 */
enum TnxtStatus tnxt_model_num_classes(const struct TnxtModel *model, size_t *out);

/**
 * Classifies one `[channels, height, width]` row-major image into
 * `logits`, which must hold at least the model's class count.
 *
 * # Safety
 * `image` must point to `channels·height·width` floats and `logits` to
 * `logits_len` writable floats.
 */
enum TnxtStatus tnxt_model_forward(const struct TnxtModel *model,
                                   const float *image,
                                   size_t channels,
                                   size_t height,
                                   size_t width,
                                   enum TnxtMode mode,
                                   float *logits,
                                   size_t logits_len);

/**
 * Parameters and FLOPs of `config` at `height×width`.
 *
 * # Safety
 * `config` must be NUL-terminated; `params` and `flops` valid for writes.
 */
enum TnxtStatus tnxt_count_flops(const char *config,
                                 size_t height,
                                 size_t width,
                                 enum TnxtMode mode,
                                 enum TnxtMacConvention convention,
                                 uint64_t *params,
                                 uint64_t *flops);

/**
 * Releases a handle; null is ignored.
 *
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void tnxt_model_free(struct TnxtModel *model);

/**
 * Message for the last failed call on this thread, or null. Valid until
 * the next call into this library from the same thread.
 */
const char *tnxt_last_error(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TRANSNEXT_H */

#ifndef PAWS_H
#define PAWS_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PawsStatus {
  PawsStatus_Ok = 0,
  PawsStatus_NullPointer = 1,
  /**
   * Bad configuration, shapes or arguments.
   */
  PawsStatus_InvalidArgument = 2,
  /**
   * Unreadable or mismatched checkpoint.
   */
  PawsStatus_Format = 3,
  PawsStatus_Io = 4,
  /**
   * Training diverged.
   */
  PawsStatus_Numerical = 5,
  /**
   * Output buffer too small.
   */
  PawsStatus_BufferTooSmall = 6,
  PawsStatus_Panic = 7,
  PawsStatus_Internal = 8,
} PawsStatus;

/**
 * Experiment configuration.
 */
typedef struct PawsConfig PawsConfig;

/**
 * Trained encoder.
 */
typedef struct PawsModel PawsModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL after a success.
 * The pointer stays valid until the next call into this library on the same thread.
 */
const char *paws_last_error(void);

/**
 * Default configuration. Free with [`paws_config_free`].
 */
struct PawsConfig *paws_config_new(void);

/**
 * Reads a `key = value` configuration file into `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum PawsStatus paws_config_load(const char *path, struct PawsConfig **out);

/**
 * Sets one configuration key, e.g. `("paws.T", "0.5")`.
 *
 * # Safety
 * `cfg` must come from this library; `key` and `value` must be NUL-terminated.
 */
enum PawsStatus paws_config_set(struct PawsConfig *cfg, const char *key, const char *value);

/**
 * # Safety
 * `cfg` must come from this library and not be used afterwards. NULL is ignored.
 */
void paws_config_free(struct PawsConfig *cfg);

/**
 * Trains with `cfg`. When `out_dir` is non-NULL, metrics, the resolved
 * configuration and the checkpoint are written there.
 *
 * # Safety
 * `cfg` must come from this library, `out_dir` must be NULL or
 * NUL-terminated, and `out` must be writable.
 */
enum PawsStatus paws_train(const struct PawsConfig *cfg,
                           const char *out_dir,
                           struct PawsModel **out);

/**
 * Loads a checkpoint file.
 *
 * # Safety
 * `path` must be NUL-terminated and `out` writable.
 */
enum PawsStatus paws_model_load(const char *path, struct PawsModel **out);

/**
 * Writes the model's parameters as a checkpoint without optimizer state.
 *
 * # Safety
 * `model` must come from this library and `path` be NUL-terminated.
 */
enum PawsStatus paws_model_save(const struct PawsModel *model, const char *path);

/**
 * Input features expected by the model, or 0 for NULL.
 *
 * # Safety
 * `model` must be NULL or come from this library.
 */
uintptr_t paws_model_input_dim(const struct PawsModel *model);

/**
 * Representation width, or 0 for NULL.
 *
 * # Safety
 * `model` must be NULL or come from this library.
 */
uintptr_t paws_model_embed_dim(const struct PawsModel *model);

/**
 * Encodes `rows` row-major inputs of width `cols` into `out`, which must
 * hold `rows * embed_dim` doubles (`out_len`).
 *
 * # Safety
 * `inputs` must point to `rows * cols` readable doubles and `out` to
 * `out_len` writable doubles.
 */
enum PawsStatus paws_model_embed(const struct PawsModel *model,
                                 const double *inputs,
                                 uintptr_t rows,
                                 uintptr_t cols,
                                 double *out,
                                 uintptr_t out_len);

/**
 * # Safety
 * `model` must come from this library and not be used afterwards. NULL is ignored.
 */
void paws_model_free(struct PawsModel *model);

/**
 * Nearest-neighbour test accuracy of `model` on the dataset described by `cfg`.
 *
 * # Safety
 * Handles must come from this library and `accuracy` must be writable.
 */
enum PawsStatus paws_eval_nn(const struct PawsModel *model,
                             const struct PawsConfig *cfg,
                             double *accuracy);

/**
 * Runs the collapse checks. `*passed` is 1 when every asserted check passed, else 0.
 *
 * # Safety
 * `passed` must be writable.
 */
enum PawsStatus paws_verify(uint64_t seed, int32_t *passed);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* PAWS_H */

#ifndef EXPRESSGAN_H
#define EXPRESSGAN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every function.
 */
typedef enum ExgStatus {
  EXG_STATUS_OK = 0,
  EXG_STATUS_NULL_ARGUMENT = 1,
  EXG_STATUS_INVALID_ARGUMENT = 2,
  EXG_STATUS_AU_LENGTH = 3,
  EXG_STATUS_IO = 4,
  EXG_STATUS_CHECKPOINT = 5,
  EXG_STATUS_INTERNAL = 6,
} ExgStatus;

/**
 * Loaded model; opaque to C.
 */
typedef struct ExgModel ExgModel;

/**
 * Face box in host-image pixels.
 */
typedef struct ExgBox {
  uint32_t x;
  uint32_t y;
  uint32_t w;
  uint32_t h;
} ExgBox;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread (empty if none). Valid
 * until the next failing call on the same thread.
 */
const char *exg_last_error(void);

/**
 * Loads a checkpoint. On success `*out` owns a model to release with
 * [`exg_model_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum ExgStatus exg_model_load(const char *path, struct ExgModel **out);

/**
 * Releases a model from [`exg_model_load`]. Null is ignored.
 *
 * # Safety
 * `model` must come from [`exg_model_load`] and not be used afterwards.
 */
void exg_model_free(struct ExgModel *model);

/**
 * Square side the model works at, 0 for null.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
uint32_t exg_model_image_size(const struct ExgModel *model);

/**
 * Number of AUs in the model's schema, 0 for null.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
uint32_t exg_model_num_aus(const struct ExgModel *model);

/**
 * SHA-256 of the checkpoint file as hex; owned by the handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
const char *exg_model_id(const struct ExgModel *model);

/**
 * Edits an RGB image. Without a box the image must be model-sized; with
 * one, pixels outside it are copied unchanged. `alpha < 0` means no
 * blending. `source` may be null (estimated when blending). `rgb_out`
 * receives `height * width * 3` bytes.
 *
 * # Safety
 * Buffers must hold the stated number of elements; `face_box` and `source`
 * may be null.
 */
enum ExgStatus exg_edit(const struct ExgModel *model,
                        const uint8_t *rgb_in,
                        uint32_t height,
                        uint32_t width,
                        const double *target,
                        uint32_t num_aus,
                        double alpha,
                        const double *source,
                        const struct ExgBox *face_box,
                        uint8_t *rgb_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EXPRESSGAN_H */

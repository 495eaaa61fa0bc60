#ifndef PGMFUSE_H
#define PGMFUSE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Model kinds, numbered as in checkpoint files.
 */
typedef enum PgmfKind {
  PGMF_KIND_LIDAR = 0,
  PGMF_KIND_EARLY = 1,
  PGMF_KIND_MID = 2,
  PGMF_KIND_LATE = 3,
  PGMF_KIND_IMAGE = 4,
} PgmfKind;

/**
 * Result codes. The first four match the command line exit codes.
 */
typedef enum PgmfStatus {
  PGMF_STATUS_OK = 0,
  /**
   * Bad argument value.
   */
  PGMF_STATUS_USAGE = 1,
  /**
   * I/O, format, parse, consistency or contract failure.
   */
  PGMF_STATUS_DATA = 2,
  /**
   * Non-finite values during computation.
   */
  PGMF_STATUS_NUMERIC = 3,
  PGMF_STATUS_NULL_POINTER = 4,
  /**
   * A Rust panic was caught at the boundary.
   */
  PGMF_STATUS_INTERNAL = 5,
} PgmfStatus;

/**
 * A polar grid frame.
 */
typedef struct PgmfFrame PgmfFrame;

/**
 * A float or INT8 model.
 */
typedef struct PgmfModel PgmfModel;

/**
 * Field of view in degrees.
 */
typedef struct PgmfFov {
  double yaw_left;
  double yaw_right;
  double pitch_up;
  double pitch_down;
} PgmfFov;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full message length without the NUL.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t pgmf_last_error_message(char *buf, size_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *pgmf_version(void);

/**
 * Builds a freshly initialized float model.
 *
 * # Safety
 * `out` must be a valid pointer to a handle slot.
 */
enum PgmfStatus pgmf_model_new(enum PgmfKind kind, uint64_t seed, struct PgmfModel **out);

/**
 * Loads a float or quantized checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid handle slot.
 */
enum PgmfStatus pgmf_model_load(const char *path, struct PgmfModel **out);

/**
 * # Safety
 * `model` must be null or a handle from this library, not yet freed.
 */
void pgmf_model_free(struct PgmfModel *model);

/**
 * # Safety
 * `model` and `out` must be valid.
 */
enum PgmfStatus pgmf_model_kind(const struct PgmfModel *model, enum PgmfKind *out);

/**
 * Trainable parameter count; 0 for quantized models.
 *
 * # Safety
 * `model` must be null or valid.
 */
uint64_t pgmf_model_param_count(const struct PgmfModel *model);

/**
 * 1 when the model runs on the INT8 path.
 *
 * # Safety
 * `model` must be null or valid.
 */
int32_t pgmf_model_is_quantized(const struct PgmfModel *model);

/**
 * Quantizes a float model using `count` calibration frames and returns a
 * new handle.
 *
 * # Safety
 * `frames` must point to `count` valid frame handles; `out` must be valid.
 */
enum PgmfStatus pgmf_model_quantize(const struct PgmfModel *model,
                                    const struct PgmfFrame *const *frames,
                                    size_t count,
                                    struct PgmfModel **out);

/**
 * Writes a quantized model to `path`.
 *
 * # Safety
 * `model` and `path` must be valid.
 */
enum PgmfStatus pgmf_model_save_quantized(const struct PgmfModel *model, const char *path);

/**
 * Projects `count` points (`x, y, z, intensity` quadruples) onto an
 * `h × w` grid. A null `fov` selects the default field of view.
 *
 * # Safety
 * `points` must point to `4 * count` floats; `fov` must be null or valid;
 * `out` must be valid.
 */
enum PgmfStatus pgmf_frame_project(const float *points,
                                   size_t count,
                                   const struct PgmfFov *fov,
                                   uint32_t h,
                                   uint32_t w,
                                   struct PgmfFrame **out);

/**
 * Reads a PGM frame file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid handle slot.
 */
enum PgmfStatus pgmf_frame_read(const char *path, struct PgmfFrame **out);

/**
 * # Safety
 * `frame` and `path` must be valid.
 */
enum PgmfStatus pgmf_frame_write(const struct PgmfFrame *frame, const char *path);

/**
 * Grid rows, columns, channels and masked-cell count.
 *
 * # Safety
 * `frame` must be valid; output pointers may be null.
 */
enum PgmfStatus pgmf_frame_dims(const struct PgmfFrame *frame,
                                uint32_t *h,
                                uint32_t *w,
                                uint32_t *c,
                                uint64_t *masked);

/**
 * # Safety
 * `frame` must be null or a handle from this library, not yet freed.
 */
void pgmf_frame_free(struct PgmfFrame *frame);

/**
 * Per-cell classes (row-major, `h * w` entries) for a frame.
 *
 * # Safety
 * `model` and `frame` must be valid; `classes` must point to `len`
 * writable `u32`s.
 */
enum PgmfStatus pgmf_infer(const struct PgmfModel *model,
                           const struct PgmfFrame *frame,
                           uint32_t *classes,
                           size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PGMFUSE_H */

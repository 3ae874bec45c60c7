#ifndef EDTER_H
#define EDTER_H

/* Generated by cbindgen from crates/ffi; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum EdterStatus {
  EDTER_STATUS_OK = 0,
  EDTER_STATUS_NULL_ARGUMENT = 1,
  EDTER_STATUS_INVALID_UTF8 = 2,
  EDTER_STATUS_USAGE = 3,
  EDTER_STATUS_CONFIG = 4,
  EDTER_STATUS_INPUT = 5,
  EDTER_STATUS_SHAPE = 6,
  EDTER_STATUS_PARSE = 7,
  EDTER_STATUS_BAD_MAGIC = 8,
  EDTER_STATUS_VERSION = 9,
  EDTER_STATUS_DIGEST_MISMATCH = 10,
  EDTER_STATUS_TRUNCATED = 11,
  EDTER_STATUS_NUMERIC = 12,
  EDTER_STATUS_IO = 13,
  EDTER_STATUS_PANIC = 14,
} EdterStatus;

/*
 Opaque edge-map handle.
 */
typedef struct EdterEdgeMap EdterEdgeMap;

/*
 Opaque model handle.
 */
typedef struct EdterModel EdterModel;

/*
 Dataset-level benchmark scores.
 */
typedef struct EdterScores {
  double ods;
  double ods_threshold;
  double ois;
  double ap;
} EdterScores;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread; empty if none. Valid
 until the next failing call on the same thread.
 */
const char *edter_last_error(void);

/*
 Static description of a status code.
 */
const char *edter_status_string(enum EdterStatus status);

/*
 Loads an "EDTR" checkpoint.

 # Safety
 `path` must be a NUL-terminated string; `out` must be writable.
 */
enum EdterStatus edter_model_load(const char *path, struct EdterModel **out);

/*
 Randomly initialized desk-scale model on `size x size` inputs.

 # Safety
 `out` must be writable.
 */
enum EdterStatus edter_model_new_toy(uint32_t size, uint64_t seed, struct EdterModel **out);

/*
 Writes the model as an "EDTR" checkpoint.

 # Safety
 `model` must come from this library; `path` must be NUL-terminated.
 */
enum EdterStatus edter_model_save(const struct EdterModel *model, const char *path);

/*
 Configured input extent.

 # Safety
 `model` must come from this library; `height` and `width` writable.
 */
enum EdterStatus edter_model_image_size(const struct EdterModel *model,
                                        uint32_t *height,
                                        uint32_t *width);

/*
 # Safety
 `model` must come from this library or be null; it is invalid afterwards.
 */
void edter_model_free(struct EdterModel *model);

/*
 Edge map of one image.

 # Safety
 `pixels` must hold `3 * height * width` doubles; `out` must be writable.
 */
enum EdterStatus edter_infer(const struct EdterModel *model,
                             const double *pixels,
                             uint32_t height,
                             uint32_t width,
                             struct EdterEdgeMap **out);

/*
 Edge map averaged over `n_scales` rescaled copies of the image.

 # Safety
 As [`edter_infer`]; `scales` must hold `n_scales` doubles.
 */
enum EdterStatus edter_infer_multiscale(const struct EdterModel *model,
                                        const double *pixels,
                                        uint32_t height,
                                        uint32_t width,
                                        const double *scales,
                                        uintptr_t n_scales,
                                        struct EdterEdgeMap **out);

/*
 Reads a PPM/PGM image and runs [`edter_infer`] on it.

 # Safety
 `path` must be NUL-terminated; `out` must be writable.
 */
enum EdterStatus edter_infer_file(const struct EdterModel *model,
                                  const char *path,
                                  struct EdterEdgeMap **out);

/*
 # Safety
 `map` must come from this library; `height` and `width` writable.
 */
enum EdterStatus edter_edge_map_size(const struct EdterEdgeMap *map,
                                     uint32_t *height,
                                     uint32_t *width);

/*
 Row-major probabilities, valid while the map lives; null for a null map.

 # Safety
 `map` must come from this library or be null.
 */
const double *edter_edge_map_data(const struct EdterEdgeMap *map);

/*
 Saves as 8-bit PGM, or raw "EPFM" floats when the path ends in `.epfm`.

 # Safety
 `map` must come from this library; `path` must be NUL-terminated.
 */
enum EdterStatus edter_edge_map_save(const struct EdterEdgeMap *map, const char *path);

/*
 # Safety
 `map` must come from this library or be null; it is invalid afterwards.
 */
void edter_edge_map_free(struct EdterEdgeMap *map);

/*
 Benchmarks a directory of predictions against annotator maps.

 # Safety
 Paths must be NUL-terminated; `out` must be writable.
 */
enum EdterStatus edter_evaluate_dirs(const char *pred_dir,
                                     const char *gt_dir,
                                     double tol,
                                     struct EdterScores *out);

/*
 Writes `n` synthetic scenes under `dir`.

 # Safety
 `dir` must be NUL-terminated.
 */
enum EdterStatus edter_synthesize(const char *dir, uint32_t n, uint64_t seed, uint32_t size);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EDTER_H */

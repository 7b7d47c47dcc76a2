#ifndef MMAL_H
#define MMAL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MmalStatus {
  MMAL_STATUS_OK = 0,
  MMAL_STATUS_NULL_POINTER = 1,
  MMAL_STATUS_INVALID_UTF8 = 2,
  MMAL_STATUS_INVALID_CONFIG = 3,
  MMAL_STATUS_INVALID_ARGUMENT = 4,
  MMAL_STATUS_IO = 5,
  MMAL_STATUS_FAILED = 6,
  MMAL_STATUS_PANIC = 7,
} MmalStatus;

/**
 * Opaque handle to a generated or loaded world.
 */
typedef struct MmalWorld MmalWorld;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next call into the library from the same thread.
 */
const char *mmal_last_error(void);

/**
 * Library version as a static string.
 */
const char *mmal_version(void);

/**
 * # Safety
 * `s` must be null or a string returned by this library, not yet freed.
 */
void mmal_string_free(char *s);

/**
 * Generates a world from a JSON world spec.
 *
 * # Safety
 * `spec_json` must be a NUL-terminated string; `out` must be writable.
 */
enum MmalStatus mmal_world_generate(const char *spec_json, struct MmalWorld **out);

/**
 * # Safety
 * `dir` must be a NUL-terminated path; `out` must be writable.
 */
enum MmalStatus mmal_world_load(const char *dir, struct MmalWorld **out);

/**
 * # Safety
 * `world` must be a live handle; `dir` a NUL-terminated path.
 */
enum MmalStatus mmal_world_save(const struct MmalWorld *world, const char *dir);

/**
 * Pool records per modality, number of modalities and test pairs.
 *
 * # Safety
 * `world` must be a live handle; each out pointer may be null.
 */
enum MmalStatus mmal_world_shape(const struct MmalWorld *world,
                                 size_t *pool_size,
                                 size_t *num_modalities,
                                 size_t *test_size);

/**
 * Borrows the row-major raw features of one pool modality. The data stays
 * valid until the world is freed.
 *
 * # Safety
 * `world` must be a live handle; out pointers must be writable.
 */
enum MmalStatus mmal_world_features(const struct MmalWorld *world,
                                    size_t modality,
                                    const double **data,
                                    size_t *rows,
                                    size_t *dim);

/**
 * # Safety
 * `world` must be null or a handle not yet freed.
 */
void mmal_world_free(struct MmalWorld *world);

/**
 * Runs an experiment config and returns the result as JSON in `out_json`,
 * to be released with `mmal_string_free`.
 *
 * # Safety
 * `config_json` must be a NUL-terminated string; `out_json` must be writable.
 */
enum MmalStatus mmal_run_experiment(const char *config_json, char **out_json);

/**
 * Greedy k-center over `n` candidate rows given `s` annotated rows, both
 * row-major with `dim` columns. Writes up to `size` candidate row indices
 * to `out_ids` in pick order and their count to `out_len`.
 *
 * # Safety
 * `candidates` must hold `n * dim` values, `annotated` `s * dim` values
 * (may be null when `s == 0`), `out_ids` room for `size` indices.
 */
enum MmalStatus mmal_greedy_kcenter(const double *candidates,
                                    size_t n,
                                    const double *annotated,
                                    size_t s,
                                    size_t dim,
                                    size_t size,
                                    size_t *out_ids,
                                    size_t *out_len);

/**
 * Gap between the two largest of `len` similarities.
 *
 * # Safety
 * `similarities` must hold `len` values; `out` must be writable.
 */
enum MmalStatus mmal_margin_score(const double *similarities, size_t len, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MMAL_H */

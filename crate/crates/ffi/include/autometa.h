#ifndef AUTOMETA_H
#define AUTOMETA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum AmStatus {
  AM_STATUS_OK = 0,
  AM_STATUS_NULL_POINTER = 1,
  AM_STATUS_INVALID_UTF8 = 2,
  AM_STATUS_IO = 3,
  /**
   * Malformed file or JSON.
   */
  AM_STATUS_FORMAT = 4,
  AM_STATUS_VERSION_MISMATCH = 5,
  AM_STATUS_INVALID_CELL = 6,
  AM_STATUS_INVALID_CONFIG = 7,
  AM_STATUS_INSUFFICIENT_DATA = 8,
  /**
   * The requested value does not exist, e.g. the best cell of an empty
   * search.
   */
  AM_STATUS_NOT_FOUND = 9,
  AM_STATUS_PANIC = 10,
  AM_STATUS_INTERNAL = 11,
} AmStatus;

/**
 * A cell genotype.
 */
typedef struct AmCell AmCell;

/**
 * A class-labelled image dataset.
 */
typedef struct AmDataset AmDataset;

/**
 * A loaded search checkpoint.
 */
typedef struct AmSearchState AmSearchState;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *am_last_error(void);

/**
 * Library version as a static string.
 */
const char *am_version(void);

/**
 * # Safety
 * `s` must come from this library and not be freed twice.
 */
void am_string_free(char *s);

/**
 * Renders a synthetic glyph dataset.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum AmStatus am_dataset_generate(uint64_t seed,
                                  size_t n_classes,
                                  size_t per_class,
                                  size_t size,
                                  struct AmDataset **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum AmStatus am_dataset_load(const char *path, struct AmDataset **out);

/**
 * Writes the dataset in FSDS format.
 *
 * # Safety
 * `ds` must be a live handle and `path` a NUL-terminated string.
 */
enum AmStatus am_dataset_save(const struct AmDataset *ds, const char *path);

/**
 * Number of classes, image height and width. Any output pointer may be NULL.
 *
 * # Safety
 * `ds` must be a live handle.
 */
enum AmStatus am_dataset_shape(const struct AmDataset *ds,
                               size_t *n_classes,
                               size_t *height,
                               size_t *width);

/**
 * # Safety
 * `ds` must be NULL or a handle not yet freed.
 */
void am_dataset_free(struct AmDataset *ds);

/**
 * Parses a cell such as `[[0,"conv3",1,"max3"]]`.
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum AmStatus am_cell_from_json(const char *json, struct AmCell **out);

/**
 * Canonical key of the cell; free with `am_string_free`.
 *
 * # Safety
 * `cell` must be a live handle and `out` a valid pointer.
 */
enum AmStatus am_cell_key(const struct AmCell *cell, char **out);

/**
 * # Safety
 * `cell` must be a live handle and `blocks` a valid pointer.
 */
enum AmStatus am_cell_num_blocks(const struct AmCell *cell, size_t *blocks);

/**
 * Longest input-to-output path in blocks.
 *
 * # Safety
 * `cell` must be a live handle and `depth` a valid pointer.
 */
enum AmStatus am_cell_depth(const struct AmCell *cell, size_t *depth);

/**
 * Number of distinct cells reachable by adding one block.
 *
 * # Safety
 * `cell` must be a live handle and `count` a valid pointer.
 */
enum AmStatus am_cell_expansion_count(const struct AmCell *cell, size_t max_blocks, size_t *count);

/**
 * Learnable parameters of the network built from this cell.
 *
 * # Safety
 * `cell` must be a live handle and `count` a valid pointer.
 */
enum AmStatus am_cell_param_count(const struct AmCell *cell,
                                  size_t filters,
                                  size_t n_classes,
                                  size_t *count);

/**
 * # Safety
 * `cell` must be NULL or a handle not yet freed.
 */
void am_cell_free(struct AmCell *cell);

/**
 * Loads a `state.json` checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum AmStatus am_state_load(const char *path, struct AmSearchState **out);

/**
 * Completed stages and number of trained candidates. Either output may be
 * NULL.
 *
 * # Safety
 * `state` must be a live handle.
 */
enum AmStatus am_state_progress(const struct AmSearchState *state, size_t *stage, size_t *trained);

/**
 * Best cell of the current beam and its observed score. Returns
 * `NotFound` before the first stage completes.
 *
 * # Safety
 * `state` must be a live handle, `cell` a valid pointer; `score` may be NULL.
 */
enum AmStatus am_state_best_cell(const struct AmSearchState *state,
                                 struct AmCell **cell,
                                 double *score);

/**
 * # Safety
 * `state` must be NULL or a handle not yet freed.
 */
void am_state_free(struct AmSearchState *state);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AUTOMETA_H */

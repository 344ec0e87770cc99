#ifndef MRDIS_H
#define MRDIS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MrdisStatus {
  MRDIS_STATUS_OK = 0,
  MRDIS_STATUS_SHAPE = 1,
  MRDIS_STATUS_NON_FINITE = 2,
  MRDIS_STATUS_INVALID_ARGUMENT = 3,
  MRDIS_STATUS_FORMAT = 4,
  MRDIS_STATUS_MISMATCH = 5,
  MRDIS_STATUS_IO = 6,
  MRDIS_STATUS_JSON = 7,
  MRDIS_STATUS_CSV = 8,
  MRDIS_STATUS_IMAGE = 9,
  MRDIS_STATUS_NULL_POINTER = 10,
  /**
   * A Rust panic was caught at the boundary; the handle involved may be
   * in an unspecified state.
   */
  MRDIS_STATUS_PANIC = 11,
} MrdisStatus;

/**
 * Labelled image split.
 */
typedef struct MrdisDataset MrdisDataset;

/**
 * Trained network at its stored precision.
 */
typedef struct MrdisModel MrdisModel;

/**
 * Per-image score vectors from one model or a fusion.
 */
typedef struct MrdisScoreDump MrdisScoreDump;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next failure on the same thread.
 */
const char *mrdis_last_error(void);

/**
 * Library version as a static string.
 */
const char *mrdis_version(void);

/**
 * Loads a checkpoint file.
 */
enum MrdisStatus mrdis_model_load(const char *file, struct MrdisModel **out);

void mrdis_model_free(struct MrdisModel *model);

/**
 * Side length of the square images the model takes; 0 for a null handle.
 */
size_t mrdis_model_image_size(const struct MrdisModel *model);

size_t mrdis_model_channels(const struct MrdisModel *model);

size_t mrdis_model_num_outputs(const struct MrdisModel *model);

/**
 * Ten-crop class probabilities for one image.
 *
 * `pixels` holds `size * size * channels` interleaved 8-bit samples, rows
 * top to bottom. `scores` must hold exactly `mrdis_model_num_outputs`
 * values.
 */
enum MrdisStatus mrdis_model_predict(const struct MrdisModel *model,
                                     const uint8_t *pixels,
                                     size_t pixels_len,
                                     double *scores,
                                     size_t scores_len);

/**
 * Scores every image of `dataset`.
 */
enum MrdisStatus mrdis_model_score_dataset(const struct MrdisModel *model,
                                           const struct MrdisDataset *dataset,
                                           struct MrdisScoreDump **out);

/**
 * Loads a dataset split file.
 */
enum MrdisStatus mrdis_dataset_load(const char *file, struct MrdisDataset **out);

void mrdis_dataset_free(struct MrdisDataset *dataset);

size_t mrdis_dataset_len(const struct MrdisDataset *dataset);

size_t mrdis_dataset_num_classes(const struct MrdisDataset *dataset);

/**
 * Copies the labels; `labels_len` must equal `mrdis_dataset_len`.
 */
enum MrdisStatus mrdis_dataset_labels(const struct MrdisDataset *dataset,
                                      size_t *labels,
                                      size_t labels_len);

enum MrdisStatus mrdis_score_dump_load(const char *file, struct MrdisScoreDump **out);

enum MrdisStatus mrdis_score_dump_save(const struct MrdisScoreDump *dump, const char *file);

void mrdis_score_dump_free(struct MrdisScoreDump *dump);

size_t mrdis_score_dump_len(const struct MrdisScoreDump *dump);

size_t mrdis_score_dump_width(const struct MrdisScoreDump *dump);

/**
 * Copies all scores, `len * width` values.
 */
enum MrdisStatus mrdis_score_dump_values(const struct MrdisScoreDump *dump,
                                         double *values,
                                         size_t values_len);

/**
 * Weighted mean of dumps over the same images. `weights` may be null for
 * equal weights; otherwise it holds `num_dumps` values summing to 1.
 */
enum MrdisStatus mrdis_score_dump_fuse(const struct MrdisScoreDump *const *dumps,
                                       size_t num_dumps,
                                       const double *weights,
                                       struct MrdisScoreDump **out);

/**
 * Top-1 and top-5 error of `dump` on `dataset`, which must be the split it
 * was scored on. Either out-pointer may be null.
 */
enum MrdisStatus mrdis_evaluate(const struct MrdisScoreDump *dump,
                                const struct MrdisDataset *dataset,
                                double *top1_error,
                                double *top5_error);

/**
 * Weighted mean of `num_models` score vectors of `width` values each.
 * `weights` may be null for equal weights. `out` holds `width` values.
 */
enum MrdisStatus mrdis_fuse(const double *scores,
                            size_t num_models,
                            size_t width,
                            const double *weights,
                            double *out);

/**
 * Greedy merging of an `n x n` similarity matrix at threshold `tau`.
 *
 * Writes each class's group index to `group_of` (`n` values). Groups are
 * numbered by their smallest member.
 */
enum MrdisStatus mrdis_merge(const double *similarity,
                             size_t n,
                             double tau,
                             size_t *group_of,
                             size_t *num_groups);

/**
 * Spreads super-category scores equally over member classes.
 *
 * `group_of` maps each of `num_classes` classes to a group in
 * `0..num_groups`, numbered by smallest member as `mrdis_merge` returns.
 */
enum MrdisStatus mrdis_redistribute(const double *super_scores,
                                    size_t num_groups,
                                    const size_t *group_of,
                                    size_t num_classes,
                                    double *out);

/**
 * Fraction of images whose label is not among the `k` highest scores.
 * Equal scores rank the lower class index first.
 */
enum MrdisStatus mrdis_top_k_error(const double *scores,
                                   size_t num_images,
                                   size_t width,
                                   const size_t *labels,
                                   size_t k,
                                   double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MRDIS_H */

#ifndef RML_H
#define RML_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum RmlLossVariant {
  RML_LOSS_VARIANT_TAL = 0,
  RML_LOSS_VARIANT_TRL = 1,
  RML_LOSS_VARIANT_TRL_S = 2,
} RmlLossVariant;

typedef enum RmlStatus {
  RML_STATUS_OK = 0,
  RML_STATUS_NULL_POINTER = 1,
  RML_STATUS_INVALID_ARGUMENT = 2,
  RML_STATUS_CONFIG = 3,
  RML_STATUS_NOISE_INJECTION = 4,
  RML_STATUS_SHAPE = 5,
  RML_STATUS_NUMERIC = 6,
  RML_STATUS_CONTRACT = 7,
  RML_STATUS_DEGENERATE = 8,
  RML_STATUS_EVALUATION = 9,
  RML_STATUS_PARSE = 10,
  RML_STATUS_DIVERGED = 11,
  RML_STATUS_IO = 12,
  RML_STATUS_PANIC = 13,
} RmlStatus;

/**
 * Opaque dataset handle.
 */
typedef struct RmlDataset RmlDataset;

/**
 * Opaque model handle.
 */
typedef struct RmlModel RmlModel;

typedef struct RmlDatasetConfig {
  size_t num_identities;
  size_t images_per_identity;
  size_t captions_per_image;
  size_t raw_dim;
  double intra_identity_noise_std;
  double prototype_offset;
  uint64_t seed;
} RmlDatasetConfig;

typedef struct RmlTrainConfig {
  size_t epochs;
  size_t batch_size;
  double learning_rate;
  /**
   * Cosine decay with linear warm-up when true, constant otherwise.
   */
  bool cosine_schedule;
  size_t warmup_epochs;
  size_t lr_warmup_epochs;
  double margin;
  double tau;
  enum RmlLossVariant loss_variant;
  size_t embed_dim;
  size_t num_tokens;
  double select_ratio;
  bool division;
  double threshold;
  uint64_t seed;
} RmlTrainConfig;

typedef struct RmlMetrics {
  double rank1;
  double rank5;
  double rank10;
  double map;
  double minp;
  size_t num_queries;
  size_t num_gallery;
  double similarity_std;
} RmlMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty if none. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *rml_last_error_message(void);

struct RmlDatasetConfig rml_dataset_config_default(void);

struct RmlTrainConfig rml_train_config_default(void);

/**
 * # Safety
 * `config` must point to a valid config; `out` to writable storage.
 */
enum RmlStatus rml_dataset_generate(const struct RmlDatasetConfig *config, struct RmlDataset **out);

/**
 * Returns a new, corrupted copy; the input is unchanged.
 *
 * # Safety
 * `dataset` must be a live handle; `out` writable.
 */
enum RmlStatus rml_dataset_inject_noise(const struct RmlDataset *dataset,
                                        double noise_rate,
                                        uint64_t seed,
                                        struct RmlDataset **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` writable.
 */
enum RmlStatus rml_dataset_load(const char *path, struct RmlDataset **out);

/**
 * # Safety
 * `dataset` must be a live handle; `path` NUL-terminated.
 */
enum RmlStatus rml_dataset_save(const struct RmlDataset *dataset, const char *path);

/**
 * Number of pairs; 0 for a null handle.
 *
 * # Safety
 * `dataset` must be null or a live handle.
 */
size_t rml_dataset_len(const struct RmlDataset *dataset);

/**
 * Number of pairs whose hidden flag marks them as corrupted.
 *
 * # Safety
 * `dataset` must be null or a live handle.
 */
size_t rml_dataset_num_noisy(const struct RmlDataset *dataset);

/**
 * # Safety
 * `dataset` must be null or a handle not yet freed.
 */
void rml_dataset_free(struct RmlDataset *dataset);

/**
 * Train on every pair of `dataset`.
 *
 * # Safety
 * `dataset` and `config` must be valid; `out` writable.
 */
enum RmlStatus rml_train(const struct RmlDataset *dataset,
                         const struct RmlTrainConfig *config,
                         struct RmlModel **out);

/**
 * # Safety
 * `path` must be NUL-terminated; `out` writable.
 */
enum RmlStatus rml_model_load(const char *path, struct RmlModel **out);

/**
 * # Safety
 * `model` must be a live handle; `path` NUL-terminated.
 */
enum RmlStatus rml_model_save(const struct RmlModel *model, const char *path);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void rml_model_free(struct RmlModel *model);

/**
 * Retrieval metrics of `model` with the clean pairs of `dataset` as queries.
 *
 * # Safety
 * Handles must be live; `out` writable.
 */
enum RmlStatus rml_evaluate(const struct RmlModel *model,
                            const struct RmlDataset *dataset,
                            struct RmlMetrics *out);

/**
 * Per-pair loss of a `k × k` row-major similarity matrix with a row-major
 * 0/1 label matrix. Writes the total to `out_total` and, if `out_per_pair`
 * is non-null, `k` per-pair values.
 *
 * # Safety
 * `sims` and `labels` must hold `k*k` elements; `out_per_pair` null or `k`.
 */
enum RmlStatus rml_batch_loss(const double *sims,
                              const uint8_t *labels,
                              size_t k,
                              enum RmlLossVariant variant,
                              double margin,
                              double tau,
                              double *out_total,
                              double *out_per_pair);

/**
 * Crate version as a static NUL-terminated string.
 */
const char *rml_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RML_H */

#ifndef NEWSCNN_H
#define NEWSCNN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes. Config, data and numerical failures share their values with
// the command-line exit codes.
typedef enum NewscnnStatus {
  NEWSCNN_STATUS_OK = 0,
  NEWSCNN_STATUS_NULL_POINTER = 1,
  NEWSCNN_STATUS_CONFIG = 2,
  NEWSCNN_STATUS_DATA = 3,
  NEWSCNN_STATUS_NUMERICAL = 4,
  NEWSCNN_STATUS_INVALID_UTF8 = 5,
  NEWSCNN_STATUS_BUFFER_TOO_SMALL = 6,
  NEWSCNN_STATUS_PANIC = 7,
} NewscnnStatus;

// Word embedding table.
typedef struct NewscnnEmbeddings NewscnnEmbeddings;

// Trained text CNN with its heads.
typedef struct NewscnnModel NewscnnModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *newscnn_version(void);

// Message of the last failure on this thread; empty after a success. The
// pointer stays valid until the next call into the library on this thread.
const char *newscnn_last_error(void);

// Loads a text-format embedding table.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a writable pointer.
enum NewscnnStatus newscnn_embeddings_load(const char *path, struct NewscnnEmbeddings **out);

// Embedding dimension of a table.
//
// # Safety
// `emb` must come from [`newscnn_embeddings_load`]; `out` must be writable.
enum NewscnnStatus newscnn_embeddings_dim(const struct NewscnnEmbeddings *emb, size_t *out);

// Releases a table; null is ignored.
//
// # Safety
// `emb` must come from [`newscnn_embeddings_load`] and not be used afterwards.
void newscnn_embeddings_free(struct NewscnnEmbeddings *emb);

// Loads a text CNN checkpoint written by `newscnn train`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a writable pointer.
enum NewscnnStatus newscnn_model_load(const char *path, struct NewscnnModel **out);

// Releases a model; null is ignored.
//
// # Safety
// `model` must come from [`newscnn_model_load`] and not be used afterwards.
void newscnn_model_free(struct NewscnnModel *model);

// Number of task heads.
//
// # Safety
// `model` must be a live handle; `out` must be writable.
enum NewscnnStatus newscnn_model_num_heads(const struct NewscnnModel *model, size_t *out);

// Index of the head for a task name (source, popularity, geolocation,
// illustration).
//
// # Safety
// `model` must be a live handle, `task` NUL-terminated, `out` writable.
enum NewscnnStatus newscnn_model_head_index(const struct NewscnnModel *model,
                                            const char *task,
                                            size_t *out);

// Output dimension of one head.
//
// # Safety
// `model` must be a live handle; `out` must be writable.
enum NewscnnStatus newscnn_model_head_dim(const struct NewscnnModel *model,
                                          size_t head,
                                          size_t *out);

// Total number of trainable values.
//
// # Safety
// `model` must be a live handle; `out` must be writable.
enum NewscnnStatus newscnn_model_param_count(const struct NewscnnModel *model, size_t *out);

// Writes the 64-character hex trunk hash plus NUL into `buf`, which must
// hold at least 65 bytes.
//
// # Safety
// `model` must be a live handle and `buf` writable for `len` bytes.
enum NewscnnStatus newscnn_model_trunk_hash(const struct NewscnnModel *model,
                                            char *buf,
                                            size_t len);

// Runs one head on an article given as `n_tokens` NUL-terminated tokens and
// writes the head output (logits, popularity, (lat, lon) or image-space
// vector) into `out`, which must hold the head dimension.
//
// # Safety
// Handles must be live, `tokens` must point to `n_tokens` NUL-terminated
// strings (it may be null when `n_tokens` is 0), and `out` must be writable
// for `out_len` values.
enum NewscnnStatus newscnn_model_predict(const struct NewscnnModel *model,
                                         const struct NewscnnEmbeddings *emb,
                                         const char *const *tokens,
                                         size_t n_tokens,
                                         size_t head,
                                         double *out,
                                         size_t out_len);

// Great-circle distance in km between two (lat, lon) points in radians.
double newscnn_gcd_km(double lat1, double lon1, double lat2, double lon2, double radius_km);

// Runs the finite-difference gradient suite. `only` is a comma-separated
// component list or null for all. Writes the largest relative error seen and
// whether every component passed the 1e-4 threshold.
//
// # Safety
// `only` must be null or NUL-terminated; `max_rel_error` and `passed` must
// be writable.
enum NewscnnStatus newscnn_gradcheck(const char *only,
                                     size_t seeds,
                                     double *max_rel_error,
                                     bool *passed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NEWSCNN_H */

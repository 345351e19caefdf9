#ifndef PUMA_H
#define PUMA_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes returned by every fallible function.
typedef enum PumaStatus {
  PUMA_STATUS_OK = 0,
  PUMA_STATUS_NULL_POINTER = 1,
  PUMA_STATUS_INVALID_ARGUMENT = 2,
  PUMA_STATUS_NUMERIC = 3,
  PUMA_STATUS_IO = 4,
  PUMA_STATUS_FORMAT = 5,
  PUMA_STATUS_BUFFER_TOO_SMALL = 6,
  PUMA_STATUS_PANIC = 7,
} PumaStatus;

// Opaque handle to a loaded model.
typedef struct PumaModel PumaModel;

// Retrieval metrics at one cutoff k.
typedef struct PumaMetrics {
  double recall_at_k;
  double r_precision;
  double map_at_r;
  // Queries without any same-class gallery item.
  size_t skipped;
} PumaMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread; empty after a success. The
// pointer stays valid until the next call on the same thread.
const char *puma_last_error(void);

// Loads a checkpoint and stores a new handle in `*out`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum PumaStatus puma_model_load(const char *path, struct PumaModel **out);

// Releases a handle; null is ignored.
//
// # Safety
// `model` must come from `puma_model_load` and not be used afterwards.
void puma_model_free(struct PumaModel *model);

// Embedding width, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t puma_model_embed_dim(const struct PumaModel *model);

// Values per input record (patches times patch width), or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t puma_model_input_len(const struct PumaModel *model);

// Embeds `n` row-major records of `puma_model_input_len` values each into
// `out`, which must hold `n * puma_model_embed_dim` values.
//
// # Safety
// `input` must point to `n * input_len` values and `out` to `out_len` values.
enum PumaStatus puma_model_embed(const struct PumaModel *model,
                                 const double *input,
                                 size_t n,
                                 double *out,
                                 size_t out_len);

// Same-set retrieval metrics with self-exclusion by id.
//
// # Safety
// `embeddings` must hold `n * dim` values, `ids` and `classes` `n` values
// each, and `out` must be valid.
enum PumaStatus puma_retrieval_metrics(const double *embeddings,
                                       const uint64_t *ids,
                                       const size_t *classes,
                                       size_t n,
                                       size_t dim,
                                       size_t k,
                                       struct PumaMetrics *out);

// Trainable parameter count of `mode` (for example "puma"), head included.
// `vit_small` selects ViT-S/16 sizes instead of the desk ones.
//
// # Safety
// `mode` must be a NUL-terminated string and `out` a valid pointer.
enum PumaStatus puma_count_trainable(const char *mode, bool vit_small, size_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PUMA_H */

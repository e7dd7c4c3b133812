/* SPDX-License-Identifier: MIT OR Apache-2.0 */

#ifndef MSAE_H
#define MSAE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MsaeStatus {
  MSAE_STATUS_OK = 0,
  MSAE_STATUS_NULL_POINTER = 1,
  MSAE_STATUS_INVALID_ARGUMENT = 2,
  MSAE_STATUS_IO = 3,
  MSAE_STATUS_FORMAT = 4,
  MSAE_STATUS_SHAPE = 5,
  MSAE_STATUS_NOT_FOUND = 6,
  MSAE_STATUS_NUMERIC = 7,
  MSAE_STATUS_PANIC = 8,
} MsaeStatus;

// Loaded embedding file.
typedef struct MsaeEmbeddings MsaeEmbeddings;

// Loaded checkpoint.
typedef struct MsaeModel MsaeModel;

// Evaluation metrics; `l0` is the mean fraction of zero activations.
typedef struct MsaeMetrics {
  double l0;
  double fvu;
  double evr;
  double cs;
  double cknna;
  double decoder_orthogonality;
  size_t dead_neurons;
} MsaeMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *msae_version(void);

// Message of the last failure on this thread, or NULL. Valid until the next
// failing call on the same thread.
const char *msae_last_error(void);

// Loads an SAE1 checkpoint.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum MsaeStatus msae_model_load(const char *path, struct MsaeModel **out);

// # Safety
// `model` must come from [`msae_model_load`] and not be used afterwards.
void msae_model_free(struct MsaeModel *model);

// Input dimension `n` and latent count `d`.
//
// # Safety
// `model` must be a live handle; `n` and `d` must be writable.
enum MsaeStatus msae_model_dims(const struct MsaeModel *model, size_t *n, size_t *d);

// Infer-mode activations of `rows` raw vectors (`rows * n` values) into
// `out` (`rows * d` values). Inputs are normalized with the training stats.
//
// # Safety
// Buffers must hold the stated number of values.
enum MsaeStatus msae_model_encode(const struct MsaeModel *model,
                                  const double *raw,
                                  size_t raw_len,
                                  size_t rows,
                                  double *out,
                                  size_t out_len);

// Decodes `rows` activation vectors (`rows * d`) to raw space (`rows * n`).
//
// # Safety
// Buffers must hold the stated number of values.
enum MsaeStatus msae_model_decode(const struct MsaeModel *model,
                                  const double *z,
                                  size_t z_len,
                                  size_t rows,
                                  double *out,
                                  size_t out_len);

// Sets `neurons[i]` to `magnitudes[i]` in the activations of one raw vector
// and writes the decoded raw vector to `out` (`n` values). `displacement`,
// if not NULL, receives the raw-space L2 distance to the unedited
// reconstruction.
//
// # Safety
// Buffers must hold the stated number of values.
enum MsaeStatus msae_model_manipulate(const struct MsaeModel *model,
                                      const double *raw,
                                      size_t n,
                                      const size_t *neurons,
                                      const double *magnitudes,
                                      size_t edits,
                                      double *out,
                                      double *displacement);

// Loads an EMB1 embedding file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum MsaeStatus msae_embeddings_load(const char *path, struct MsaeEmbeddings **out);

// # Safety
// `set` must come from [`msae_embeddings_load`] and not be used afterwards.
void msae_embeddings_free(struct MsaeEmbeddings *set);

// Row count and dimension.
//
// # Safety
// `set` must be a live handle; `rows` and `n` must be writable.
enum MsaeStatus msae_embeddings_dims(const struct MsaeEmbeddings *set, size_t *rows, size_t *n);

// Copies the matrix (`rows * n` values, row-major) into `out`.
//
// # Safety
// `out` must hold `out_len` values.
enum MsaeStatus msae_embeddings_copy(const struct MsaeEmbeddings *set, double *out, size_t out_len);

// Evaluates `model` on `set` using the checkpoint's stats for the set's
// modality. `cknna_k = 0` selects the default of 10.
//
// # Safety
// Handles must be live; `out` must be writable.
enum MsaeStatus msae_evaluate(const struct MsaeModel *model,
                              const struct MsaeEmbeddings *set,
                              size_t cknna_k,
                              uint64_t seed,
                              struct MsaeMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MSAE_H */

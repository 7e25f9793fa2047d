/* Generated by cbindgen from crates/ffi. Do not edit. */

#ifndef SRPL_H
#define SRPL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  SRPL_STATUS_OK = 0,
  SRPL_STATUS_NULL_POINTER = 1,
  SRPL_STATUS_INVALID_ARGUMENT = 2,
  SRPL_STATUS_NUMERIC = 3,
  SRPL_STATUS_STATE = 4,
  SRPL_STATUS_FORMAT = 5,
  SRPL_STATUS_MISSING = 6,
  SRPL_STATUS_IO = 7,
  SRPL_STATUS_BUFFER_TOO_SMALL = 8,
  SRPL_STATUS_PANIC = 9,
} SrplStatus;

typedef enum {
  SRPL_BASIS_FIELD_OMEGA = 0,
  SRPL_BASIS_FIELD_AMPLITUDE = 1,
  SRPL_BASIS_FIELD_PHASE_Q = 2,
  SRPL_BASIS_FIELD_PHASE_K = 3,
} SrplBasisField;

typedef enum {
  SRPL_SIDE_QUERY = 0,
  SRPL_SIDE_KEY = 1,
} SrplSide;

typedef enum {
  SRPL_ENGINE_STANDARD = 0,
  SRPL_ENGINE_SPECTRAL = 1,
} SrplEngine;

/**
 * Opaque spectral basis handle.
 */
typedef struct SrplBasis SrplBasis;

/**
 * Opaque model handle.
 */
typedef struct SrplModel SrplModel;

/**
 * Model hyperparameters. Spectral bases start from zero phases.
 */
typedef struct {
  size_t vocab_size;
  size_t hidden_dim;
  size_t num_heads;
  size_t num_layers;
  size_t max_seq_len;
  double rope_base;
  SrplEngine engine;
  bool untied_phase;
} SrplModelConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` (NUL
 * terminated, truncated to `len`). Returns the full message length
 * including the terminator, or 0 when there is no error.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t srpl_last_error_message(char *buf, size_t len);

/**
 * Geometric basis for rotary dimension `d`. With `surgical` the phases are
 * zero; otherwise they carry Gaussian noise seeded by `noise_seed`.
 *
 * # Safety
 * `out` must be a valid pointer to a handle slot.
 */
SrplStatus srpl_basis_geometric(size_t d,
                                double base,
                                bool surgical,
                                uint64_t noise_seed,
                                SrplBasis **out);

/**
 * Basis from explicit vectors of length `half`. `phase_k` null means the
 * phases are tied to `phase_q`.
 *
 * # Safety
 * Non-null array pointers must reference `half` readable doubles.
 */
SrplStatus srpl_basis_from_arrays(size_t half,
                                  const double *omega,
                                  const double *amplitude,
                                  const double *phase_q,
                                  const double *phase_k,
                                  SrplBasis **out);

/**
 * # Safety
 * `basis` must be null or a handle from this library, not yet freed.
 */
void srpl_basis_free(SrplBasis *basis);

/**
 * Number of dimension pairs, or 0 for a null handle.
 *
 * # Safety
 * `basis` must be null or a live handle.
 */
size_t srpl_basis_half_dim(const SrplBasis *basis);

/**
 * Copies one basis vector into `out` (`len` ≥ half dimension).
 *
 * # Safety
 * `basis` must be a live handle; `out` must reference `len` writable doubles.
 */
SrplStatus srpl_basis_get(const SrplBasis *basis, SrplBasisField field, double *out, size_t len);

/**
 * Rotates `rows × d` row-major `x` at `positions` into `out` (same shape).
 *
 * # Safety
 * `x` and `out` must reference `rows * d` doubles, `positions` `rows` entries.
 */
SrplStatus srpl_spectral_rotate(const SrplBasis *basis,
                                const double *x,
                                size_t rows,
                                size_t d,
                                const size_t *positions,
                                SrplSide side,
                                double *out);

/**
 * Score between `q` rotated at `m` and `k` rotated at `n`.
 *
 * # Safety
 * `q` and `k` must reference `d` doubles; `out` one writable double.
 */
SrplStatus srpl_pairwise_score(const SrplBasis *basis,
                               const double *q,
                               const double *k,
                               size_t d,
                               size_t m,
                               size_t n,
                               double *out);

/**
 * Writes `2πk/N` for `k = 1..=k_max` into `out`.
 *
 * # Safety
 * `out` must reference `len` writable doubles.
 */
SrplStatus srpl_resonance_frequencies(size_t n, size_t k_max, double *out, size_t len);

/**
 * Builds a model deterministically from `seed`.
 *
 * # Safety
 * `config` must point to a valid config; `out` to a handle slot.
 */
SrplStatus srpl_model_build(const SrplModelConfig *config, uint64_t seed, SrplModel **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` a handle slot.
 */
SrplStatus srpl_model_load(const char *path, SrplModel **out);

/**
 * # Safety
 * `model` must be a live handle; `path` a NUL-terminated string.
 */
SrplStatus srpl_model_save(const SrplModel *model, const char *path);

/**
 * Vocabulary size, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t srpl_model_vocab_size(const SrplModel *model);

/**
 * Causal logits for `tokens`, written row-major into `out`
 * (`len` ≥ `n_tokens * vocab_size`).
 *
 * # Safety
 * `tokens` must reference `n_tokens` entries and `out` `len` doubles.
 */
SrplStatus srpl_model_forward(const SrplModel *model,
                              const size_t *tokens,
                              size_t n_tokens,
                              double *out,
                              size_t len);

/**
 * Spectral copy of a standard-engine model with identical outputs.
 *
 * # Safety
 * `model` must be a live handle; `out` a handle slot.
 */
SrplStatus srpl_model_surgical_swap(const SrplModel *model, SrplModel **out);

/**
 * # Safety
 * `model` must be null or a handle from this library, not yet freed.
 */
void srpl_model_free(SrplModel *model);

/**
 * Reverse complement of a DNA string into `out` (NUL terminated).
 *
 * # Safety
 * `dna` must be NUL terminated; `out` must reference `len` writable bytes.
 */
SrplStatus srpl_reverse_complement(const char *dna, char *out, size_t len);

/**
 * Pushdown check of a bracket string over `()[]{}`.
 *
 * # Safety
 * `s` must be NUL terminated; `valid` and `max_depth` writable.
 */
SrplStatus srpl_dyck_validate(const char *s, bool *valid, size_t *max_depth);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SRPL_H */

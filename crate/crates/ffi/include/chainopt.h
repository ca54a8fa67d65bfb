#ifndef CHAINOPT_H
#define CHAINOPT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define CHAINOPT_OK 0

#define CHAINOPT_ERR_NULL 1

#define CHAINOPT_ERR_UTF8 2

#define CHAINOPT_ERR_PARSE 3

#define CHAINOPT_ERR_DIMENSION 4

#define CHAINOPT_ERR_NUMERIC 5

#define CHAINOPT_ERR_INVALID 6

#define CHAINOPT_ERR_UNBOUNDED 7

#define CHAINOPT_ERR_RANGE 8

#define CHAINOPT_ERR_OTHER 9

#define CHAINOPT_ERR_PANIC 10

/**
 * Parsed architecture. Opaque to C.
 */
typedef struct ChainoptArch ChainoptArch;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Parses architecture text. On success `*out` owns a new handle.
 *
 * # Safety
 * `text` must be a NUL-terminated string and `out` a valid pointer.
 */
int32_t chainopt_arch_parse(const char *text, struct ChainoptArch **out);

/**
 * Reads and parses an architecture file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
int32_t chainopt_arch_load(const char *path, struct ChainoptArch **out);

/**
 * Releases a handle; null is ignored.
 *
 * # Safety
 * `arch` must come from this library and not be used afterwards.
 */
void chainopt_arch_free(struct ChainoptArch *arch);

/**
 * Number of layers τ.
 *
 * # Safety
 * `arch` must be a live handle and `out` a valid pointer.
 */
int32_t chainopt_arch_num_layers(struct ChainoptArch *arch, size_t *out);

/**
 * Sets the batch size m.
 *
 * # Safety
 * `arch` must be a live handle.
 */
int32_t chainopt_arch_set_batch(struct ChainoptArch *arch, size_t batch);

/**
 * Replaces every batch-norm ε.
 *
 * # Safety
 * `arch` must be a live handle.
 */
int32_t chainopt_arch_set_batchnorm_eps(struct ChainoptArch *arch, double eps);

/**
 * Sets every parameter radius and the input norm.
 *
 * # Safety
 * `arch` must be a live handle.
 */
int32_t chainopt_arch_set_domain(struct ChainoptArch *arch, double radius, double input_norm);

/**
 * Natural logs of (m_t, ℓ_t, L_t) after layer `layer` (1-based); 0 selects
 * the chain output. +∞ marks an unbounded constant.
 *
 * # Safety
 * `arch` must be a live handle; `ln_m`, `ln_l`, `ln_big_l` valid pointers.
 */
int32_t chainopt_smoothness(struct ChainoptArch *arch,
                            size_t layer,
                            double *ln_m,
                            double *ln_l,
                            double *ln_big_l);

/**
 * Largest relative error of directional backward derivatives against
 * central differences at a seeded point, on a batch of `batch` samples.
 *
 * # Safety
 * `arch` must be a live handle and `max_rel_error` a valid pointer.
 */
int32_t chainopt_gradcheck(struct ChainoptArch *arch,
                           size_t batch,
                           uint64_t seed,
                           double *max_rel_error);

/**
 * Relative disagreement of the DP Newton step and the dual Gauss-Newton
 * step with dense solves, on a softplus chain of `tau` layers.
 *
 * # Safety
 * `dp_error` and `dual_error` must be valid pointers.
 */
int32_t chainopt_oracle_agreement(size_t tau,
                                  size_t width,
                                  size_t batch,
                                  double kappa,
                                  uint64_t seed,
                                  double *dp_error,
                                  double *dual_error);

/**
 * Copies the calling thread's last error message into `buf` (NUL
 * terminated, truncated to `len`). Returns the full message length in bytes,
 * 0 when there is no error.
 *
 * # Safety
 * `buf` must point to `len` writable bytes, or be null with `len` 0.
 */
size_t chainopt_last_error_message(char *buf, size_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *chainopt_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CHAINOPT_H */

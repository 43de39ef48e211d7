#ifndef MRGL_H
#define MRGL_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Nonparametric basis family.
 */
typedef enum {
  MRGL_FAMILY_FOURIER = 0,
  MRGL_FAMILY_HAAR = 1,
} MrglFamily;

/**
 * Result codes; the non-zero values match the command-line exit codes where
 * they overlap.
 */
typedef enum {
  MRGL_STATUS_OK = 0,
  MRGL_STATUS_CONFIG = 2,
  MRGL_STATUS_NON_CONVERGENCE = 3,
  MRGL_STATUS_CERTIFICATION = 4,
  MRGL_STATUS_DIMENSION = 5,
  MRGL_STATUS_DOMAIN = 6,
  MRGL_STATUS_NULL_POINTER = 7,
  MRGL_STATUS_IO = 8,
  MRGL_STATUS_PANIC = 9,
} MrglStatus;

/**
 * A fitted model.
 */
typedef struct MrglModel MrglModel;

/**
 * Fit settings. Negative `k_star` / `k_max` select the default levels.
 */
typedef struct {
  double sigma;
  double eps;
  double a0;
  MrglFamily family;
  int32_t k_star;
  int32_t k_max;
  uint32_t max_sweeps;
} MrglFitOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Default options: unit noise scale, `eps = 1`, `A0 = 2`, Fourier basis.
 */
MrglFitOptions mrgl_fit_options_default(void);

/**
 * Message of the last failure on this thread, or null. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *mrgl_last_error(void);

/**
 * Fits an all-nonparametric additive model to `x` (`n x p`, row-major, in
 * [0, 1]) and `y` (length `n`). On success `*out` owns a new model. A fit
 * that stops at the sweep limit still yields a model and returns
 * `NonConvergence`.
 *
 * # Safety
 * `x` must hold `n * p` doubles, `y` must hold `n`, `options` and `out` must
 * be valid pointers.
 */
MrglStatus mrgl_model_fit(const double *x,
                          uintptr_t n,
                          uintptr_t p,
                          const double *y,
                          const MrglFitOptions *options,
                          MrglModel **out);

/**
 * Releases a model; null is ignored.
 *
 * # Safety
 * `model` must be null or a pointer returned by [`mrgl_model_fit`] that has
 * not been freed.
 */
void mrgl_model_free(MrglModel *model);

/**
 * Evaluates the fitted function at `m` rows of `x_new` (`m x p`, row-major)
 * into `out` (length `m`).
 *
 * # Safety
 * `model` must be live, `x_new` must hold `m * p` doubles and `out` must
 * have room for `m`.
 */
MrglStatus mrgl_model_predict(const MrglModel *model,
                              const double *x_new,
                              uintptr_t m,
                              uintptr_t p,
                              double *out);

/**
 * Copies the `n` in-sample fitted values into `out`.
 *
 * # Safety
 * `model` must be live and `out` must have room for `n` doubles.
 */
MrglStatus mrgl_model_fitted(const MrglModel *model, double *out, uintptr_t n);

/**
 * Number of penalized groups, or 0 for a null model.
 *
 * # Safety
 * `model` must be null or live.
 */
uintptr_t mrgl_model_num_groups(const MrglModel *model);

/**
 * Number of groups with a nonzero fitted component, or 0 for a null model.
 *
 * # Safety
 * `model` must be null or live.
 */
uintptr_t mrgl_model_active_count(const MrglModel *model);

/**
 * Whether the fit met its convergence and optimality tolerances.
 *
 * # Safety
 * `model` must be null or live.
 */
bool mrgl_model_converged(const MrglModel *model);

/**
 * Baseline and top resolution levels.
 *
 * # Safety
 * `model` must be live; `k_star` and `k_max` must be writable.
 */
MrglStatus mrgl_model_levels(const MrglModel *model, uint32_t *k_star, uint32_t *k_max);

/**
 * Coefficients, penalty levels and optimality report as a JSON string owned
 * by the caller; release with [`mrgl_string_free`]. Null on failure.
 *
 * # Safety
 * `model` must be null or live.
 */
char *mrgl_model_to_json(const MrglModel *model);

/**
 * Releases a string returned by this library; null is ignored.
 *
 * # Safety
 * `s` must be null or a string returned by [`mrgl_model_to_json`] that has
 * not been freed.
 */
void mrgl_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MRGL_H */

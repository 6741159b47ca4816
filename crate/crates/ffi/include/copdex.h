#ifndef COPDEX_H
#define COPDEX_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum copdex_status {
  COPDEX_STATUS_OK = 0,
  COPDEX_STATUS_NULL_POINTER = 1,
  COPDEX_STATUS_INVALID_ARGUMENT = 2,
  COPDEX_STATUS_DOMAIN = 3,
  COPDEX_STATUS_CONFIG = 4,
  COPDEX_STATUS_EXCLUDED_OUTCOME = 5,
  COPDEX_STATUS_GRID_TOO_LARGE = 6,
  COPDEX_STATUS_SINGULAR = 7,
  COPDEX_STATUS_INFEASIBLE = 8,
  COPDEX_STATUS_TRUNCATION_DEFICIT = 9,
  COPDEX_STATUS_IO = 10,
  COPDEX_STATUS_PANIC = 11,
} copdex_status;

typedef enum copdex_family {
  COPDEX_FAMILY_PRODUCT = 0,
  COPDEX_FAMILY_CLAYTON = 1,
  COPDEX_FAMILY_GUMBEL = 2,
} copdex_family;

/**
 * An approximate block design.
 */
typedef struct copdex_design copdex_design;

/**
 * A resolved experiment with its block-FIM cache.
 */
typedef struct copdex_experiment copdex_experiment;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread; empty after a success.
 * The pointer stays valid until the next call on this thread.
 */
const char *copdex_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *copdex_version(void);

/**
 * # Safety
 * `out_alpha` must be valid for writes.
 */
enum copdex_status copdex_tau_to_alpha(enum copdex_family family, double tau, double *out_alpha);

/**
 * # Safety
 * `out_tau` must be valid for writes.
 */
enum copdex_status copdex_alpha_to_tau(enum copdex_family family, double alpha, double *out_tau);

/**
 * Copula CDF at `u[0..k]`.
 *
 * # Safety
 * `u` must hold `k` values; `out_value` must be valid for writes.
 */
enum copdex_status copdex_copula_cdf(enum copdex_family family,
                                     double alpha,
                                     const double *u,
                                     size_t k,
                                     double *out_value);

/**
 * Loads an experiment config file, or a bundled preset given as `preset:NAME`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out_experiment` valid for writes.
 */
enum copdex_status copdex_experiment_load(const char *path,
                                          struct copdex_experiment **out_experiment);

/**
 * Builds an experiment from config JSON. Relative file references resolve
 * against the bundled presets.
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out_experiment` valid for writes.
 */
enum copdex_status copdex_experiment_from_json(const char *json,
                                               struct copdex_experiment **out_experiment);

/**
 * # Safety
 * `experiment` must come from this library or be null.
 */
void copdex_experiment_free(struct copdex_experiment *experiment);

/**
 * Number of estimable parameters `q` and criterion dimension `s`.
 *
 * # Safety
 * Pointers must be valid.
 */
enum copdex_status copdex_experiment_dims(const struct copdex_experiment *experiment,
                                          size_t *out_q,
                                          size_t *out_s);

/**
 * Runs the optimizer on the experiment's candidate set.
 *
 * # Safety
 * Pointers must be valid; `out_converged` may be null.
 */
enum copdex_status copdex_optimize(const struct copdex_experiment *experiment,
                                   struct copdex_design **out_design,
                                   bool *out_converged);

/**
 * Builds a design from `n_blocks` blocks of `k` units with `m` factors.
 * `coords` is block-major, then unit, then factor (`n_blocks·k·m` values).
 *
 * # Safety
 * Arrays must hold the stated number of values; `out_design` valid for writes.
 */
enum copdex_status copdex_design_new(size_t n_blocks,
                                     size_t k,
                                     size_t m,
                                     const double *coords,
                                     const double *weights,
                                     struct copdex_design **out_design);

/**
 * # Safety
 * `design` must come from this library or be null.
 */
void copdex_design_free(struct copdex_design *design);

/**
 * Support size, units per block and factors per unit.
 *
 * # Safety
 * Pointers must be valid.
 */
enum copdex_status copdex_design_shape(const struct copdex_design *design,
                                       size_t *out_blocks,
                                       size_t *out_k,
                                       size_t *out_m);

/**
 * Copies block `index` (k·m coordinates) and its weight.
 *
 * # Safety
 * `out_coords` must have room for k·m values; pointers must be valid.
 */
enum copdex_status copdex_design_block(const struct copdex_design *design,
                                       size_t index,
                                       double *out_coords,
                                       double *out_weight);

/**
 * Prior-averaged criterion value Ψ (larger is better).
 *
 * # Safety
 * Pointers must be valid.
 */
enum copdex_status copdex_criterion(const struct copdex_experiment *experiment,
                                    const struct copdex_design *design,
                                    double *out_value);

/**
 * Efficiency of `design` relative to `reference`.
 *
 * # Safety
 * Pointers must be valid.
 */
enum copdex_status copdex_efficiency(const struct copdex_experiment *experiment,
                                     const struct copdex_design *design,
                                     const struct copdex_design *reference,
                                     double *out_value);

/**
 * Sensitivity of one block (k·m coordinates) relative to `design`.
 *
 * # Safety
 * `block` must hold k·m values matching the design's shape.
 */
enum copdex_status copdex_sensitivity(const struct copdex_experiment *experiment,
                                      const struct copdex_design *design,
                                      const double *block,
                                      size_t k,
                                      size_t m,
                                      double *out_value);

/**
 * Maximum sensitivity over the experiment's candidate set and whether it
 * stays within `s·(1 + tol)`.
 *
 * # Safety
 * Pointers must be valid; `out_pass` may be null.
 */
enum copdex_status copdex_verify(const struct copdex_experiment *experiment,
                                 const struct copdex_design *design,
                                 double tol,
                                 double *out_max,
                                 bool *out_pass);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* COPDEX_H */

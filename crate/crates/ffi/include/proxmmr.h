#ifndef PROXMMR_H
#define PROXMMR_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result code of every fallible call.
 */
typedef enum ProxmmrStatus {
  PROXMMR_STATUS_OK = 0,
  PROXMMR_STATUS_NULL_POINTER = 1,
  PROXMMR_STATUS_INVALID_ARGUMENT = 2,
  PROXMMR_STATUS_DIMENSION = 3,
  PROXMMR_STATUS_DOMAIN = 4,
  PROXMMR_STATUS_TRAINING = 5,
  PROXMMR_STATUS_CONFIG = 6,
  PROXMMR_STATUS_IO = 7,
  PROXMMR_STATUS_PARSE = 8,
  PROXMMR_STATUS_INTERNAL = 9,
} ProxmmrStatus;

/*
 Opaque training dataset.
 */
typedef struct ProxmmrDataset ProxmmrDataset;

/*
 Opaque fitted estimator.
 */
typedef struct ProxmmrEstimator ProxmmrEstimator;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Library version as a static NUL-terminated string.
 */
const char *proxmmr_version(void);

/*
 Message of the last failed call on this thread, or NULL after a
 successful call. Valid until the next call on this thread.
 */
const char *proxmmr_last_error(void);

/*
 Samples `n` rows of the demand model with the given proxy noise variances.

 # Safety
 `out` must be a valid pointer to writable storage for one handle.
 */
enum ProxmmrStatus proxmmr_demand_sample(size_t n,
                                         uint64_t seed,
                                         double var_z,
                                         double var_w,
                                         struct ProxmmrDataset **out);

/*
 Builds a dataset from caller arrays: `a` is `n × a_dim`, `w` is
 `n × w_dim`, `z` is `n × z_dim`, `y` has `n` entries. All are copied.

 # Safety
 Each array must hold the stated number of doubles; `out` must be writable.
 */
enum ProxmmrStatus proxmmr_dataset_from_arrays(size_t n,
                                               const double *a,
                                               size_t a_dim,
                                               const double *w,
                                               size_t w_dim,
                                               const double *z,
                                               size_t z_dim,
                                               const double *y,
                                               struct ProxmmrDataset **out);

/*
 Number of rows, or 0 for a null handle.

 # Safety
 `data` must be null or a live dataset handle.
 */
size_t proxmmr_dataset_len(const struct ProxmmrDataset *data);

/*
 # Safety
 `data` must be null or a handle not yet freed.
 */
void proxmmr_dataset_free(struct ProxmmrDataset *data);

/*
 Fits `method` ("nmmr-u", "nmmr-v", "naive", "ls", "ls-qf", "2sls") with
 the tuned defaults of `experiment` ("demand" or "sprite"). `overrides`
 is NULL or a JSON object with any of lr, lambda, epochs, batch_size,
 width, depth.

 # Safety
 Strings must be NUL-terminated; `data` must be live; `out` writable.
 */
enum ProxmmrStatus proxmmr_fit(const struct ProxmmrDataset *data,
                               const char *method,
                               const char *experiment,
                               const char *overrides,
                               uint64_t seed,
                               struct ProxmmrEstimator **out);

/*
 Bridge values `h(a_i, w_i)` for `n` paired rows into `out[n]`.

 # Safety
 `a` holds `n × a_dim`, `w` holds `n × w_dim` doubles; `out` holds `out_len`.
 */
enum ProxmmrStatus proxmmr_estimator_predict(const struct ProxmmrEstimator *est,
                                             const double *a,
                                             const double *w,
                                             size_t n,
                                             double *out,
                                             size_t out_len);

/*
 Potential-outcome curve: for each of the `n_grid` treatment rows, the
 mean bridge value over the `n_w` held-out outcome-proxy rows.

 # Safety
 `grid` holds `n_grid × a_dim`, `heldout_w` holds `n_w × w_dim` doubles;
 `out` holds `out_len`.
 */
enum ProxmmrStatus proxmmr_estimator_predict_curve(const struct ProxmmrEstimator *est,
                                                   const double *grid,
                                                   size_t n_grid,
                                                   const double *heldout_w,
                                                   size_t n_w,
                                                   double *out,
                                                   size_t out_len);

/*
 Treatment and outcome-proxy widths of a fitted estimator.

 # Safety
 `est` must be live; `a_dim` and `w_dim` writable.
 */
enum ProxmmrStatus proxmmr_estimator_dims(const struct ProxmmrEstimator *est,
                                          size_t *a_dim,
                                          size_t *w_dim);

/*
 Serializes an estimator to JSON. Release the string with
 [`proxmmr_string_free`].

 # Safety
 `est` must be live; `out` writable.
 */
enum ProxmmrStatus proxmmr_estimator_to_json(const struct ProxmmrEstimator *est, char **out);

/*
 # Safety
 `json` must be NUL-terminated; `out` writable.
 */
enum ProxmmrStatus proxmmr_estimator_from_json(const char *json, struct ProxmmrEstimator **out);

/*
 # Safety
 `est` must be null or a handle not yet freed.
 */
void proxmmr_estimator_free(struct ProxmmrEstimator *est);

/*
 # Safety
 `s` must be null or a string returned by this library, not yet freed.
 */
void proxmmr_string_free(char *s);

/*
 Monte Carlo `E[Y^a]` of the demand model at `n` prices, with `mc` draws
 of the confounder and outcome-proxy noise variance `var_w`.

 # Safety
 `grid` holds `n` doubles; `out` holds `out_len`.
 */
enum ProxmmrStatus proxmmr_demand_truth(const double *grid,
                                        size_t n,
                                        size_t mc,
                                        uint64_t seed,
                                        double var_w,
                                        double *out,
                                        size_t out_len);

/*
 Causal mean squared error between two curves of length `n`.

 # Safety
 `predicted` and `truth` hold `n` doubles; `out` is writable.
 */
enum ProxmmrStatus proxmmr_c_mse(const double *predicted,
                                 const double *truth,
                                 size_t n,
                                 double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PROXMMR_H */

#ifndef APVERIFY_H
#define APVERIFY_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of a call.
 */
typedef enum ApvStatus {
  APV_STATUS_OK = 0,
  APV_STATUS_NULL_POINTER = 1,
  APV_STATUS_INVALID_ARGUMENT = 2,
  APV_STATUS_CONFIG = 3,
  APV_STATUS_IO = 4,
  APV_STATUS_NUMERICAL = 5,
  APV_STATUS_PANIC = 6,
} ApvStatus;

/**
 * Path termination.
 */
typedef enum ApvOutcome {
  APV_OUTCOME_HIT = 0,
  APV_OUTCOME_JUMP = 1,
  APV_OUTCOME_CENSORED = 2,
} ApvOutcome;

/**
 * Density variant selector.
 */
typedef enum ApvVariant {
  APV_VARIANT_LITERAL = 0,
  APV_VARIANT_CORRECTED = 1,
} ApvVariant;

/**
 * Opaque simulated path ensemble.
 */
typedef struct ApvBundle ApvBundle;

/**
 * Opaque validated model parameters.
 */
typedef struct ApvParams ApvParams;

/**
 * Plain copy of the parameter record.
 */
typedef struct ApvParamValues {
  double a;
  double p;
  double q;
  double b;
  double delta;
  double gamma;
  double level;
  /**
   * 0 literal, 1 corrected.
   */
  int variant;
} ApvParamValues;

/**
 * Terminal data of one path. Times that did not occur are NaN.
 */
typedef struct ApvPathSummary {
  uint64_t path_id;
  enum ApvOutcome outcome;
  double t1;
  double t2;
  double t_final;
  double s_final;
  double b_final;
  double compensator_final;
} ApvPathSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer is
 * valid until the next call into this library from the same thread.
 */
const char *apv_last_error_message(void);

/**
 * Validates parameters. Pass `b = NaN` to search for a feasible `b`;
 * `variant` is an [`ApvVariant`] value.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for a handle.
 */
enum ApvStatus apv_params_new(double a, double p, double b, int variant, struct ApvParams **out);

/**
 * Releases a parameter handle; NULL is ignored.
 *
 * # Safety
 * `h` must come from [`apv_params_new`] and not have been freed.
 */
void apv_params_free(struct ApvParams *h);

/**
 * # Safety
 * `h` must be a live handle and `out` writable.
 */
enum ApvStatus apv_params_get(const struct ApvParams *h, struct ApvParamValues *out);

/**
 * Serializes parameters to JSON. Free the string with [`apv_string_free`].
 *
 * # Safety
 * `h` must be a live handle and `out` writable.
 */
enum ApvStatus apv_params_to_json(const struct ApvParams *h, char **out);

/**
 * Releases a string returned by this library; NULL is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void apv_string_free(char *s);

/**
 * Jump intensity at price `s`.
 *
 * # Safety
 * `h` must be a live handle and `out` writable.
 */
enum ApvStatus apv_intensity(const struct ApvParams *h, double s, bool post_hit, double *out);

/**
 * `1 + b/(1-a)`; requires `0 < a < 1` and `b >= a`.
 *
 * # Safety
 * `out` must be writable.
 */
enum ApvStatus apv_p_prime(double a, double b, double *out);

/**
 * Simulates `n_paths` paths under `Q` on the default grid. `t_max = NaN`
 * uses the default horizon.
 *
 * # Safety
 * `h` must be a live handle and `out` writable.
 */
enum ApvStatus apv_simulate(const struct ApvParams *h,
                            uint64_t n_paths,
                            uint64_t seed,
                            double t_max,
                            struct ApvBundle **out);

/**
 * Number of paths in a bundle (0 for NULL).
 *
 * # Safety
 * `h` must be NULL or a live handle.
 */
uint64_t apv_bundle_len(const struct ApvBundle *h);

/**
 * Fraction of paths unresolved at the horizon (NaN for NULL).
 *
 * # Safety
 * `h` must be NULL or a live handle.
 */
double apv_bundle_censored_mass(const struct ApvBundle *h);

/**
 * # Safety
 * `h` must be a live handle and `out` writable.
 */
enum ApvStatus apv_bundle_path(const struct ApvBundle *h,
                               uint64_t index,
                               struct ApvPathSummary *out);

/**
 * Releases a bundle; NULL is ignored.
 *
 * # Safety
 * `h` must come from [`apv_simulate`] and not have been freed.
 */
void apv_bundle_free(struct ApvBundle *h);

/**
 * Runs an experiment described by a JSON configuration and writes its
 * reports. On `Ok`, `exit_code` receives 0 (all checks passed) or 1 (a
 * gating check was violated).
 *
 * # Safety
 * `config_json` must be a NUL-terminated UTF-8 string; `exit_code` must be
 * writable.
 */
enum ApvStatus apv_run_experiment(const char *config_json, int *exit_code);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* APVERIFY_H */

#ifndef SELECTPT_H
#define SELECTPT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every accountant function.
 */
typedef enum {
  /**
   * Success.
   */
  SPT_STATUS_OK = 0,
  /**
   * A pointer argument was null.
   */
  SPT_STATUS_NULL_POINTER = 1,
  /**
   * A numeric argument was out of range.
   */
  SPT_STATUS_INVALID_ARGUMENT = 2,
  /**
   * The accountant has no stages yet.
   */
  SPT_STATUS_NO_STAGES = 3,
  /**
   * The accountant rejected the query (delta unreachable, truncation
   * exceeded, calibration bracket exhausted, ...).
   */
  SPT_STATUS_ACCOUNTING = 4,
  /**
   * Unexpected internal failure.
   */
  SPT_STATUS_INTERNAL = 5,
} SptStatus;

/**
 * Opaque accountant: an ordered list of subsampled Gaussian stages.
 */
typedef struct SptAccountant SptAccountant;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Create an empty accountant. Returns null only on allocation failure.
 * Must be released with `spt_accountant_free`.
 */
SptAccountant *spt_accountant_new(void);

/**
 * Release an accountant. Null is a no-op.
 *
 * # Safety
 * `accountant` must be a pointer returned by `spt_accountant_new` that has
 * not been freed already.
 */
void spt_accountant_free(SptAccountant *accountant);

/**
 * Append one subsampled Gaussian stage
 * (noise multiplier, Poisson sampling rate, step count).
 *
 * # Safety
 * `accountant` must be a live handle from `spt_accountant_new`.
 */
SptStatus spt_accountant_add_stage(SptAccountant *accountant,
                                   double noise_multiplier,
                                   double sampling_rate,
                                   uint32_t steps);

/**
 * Number of stages currently recorded.
 *
 * # Safety
 * `accountant` must be a live handle; `out_count` must be writable.
 */
SptStatus spt_accountant_stage_count(const SptAccountant *accountant, uint32_t *out_count);

/**
 * Epsilon of the adaptive composition of all stages at the given delta,
 * from the numerical loss-distribution accountant.
 *
 * # Safety
 * `accountant` must be a live handle; `out_epsilon` must be writable.
 */
SptStatus spt_accountant_epsilon(const SptAccountant *accountant,
                                 double delta,
                                 double *out_epsilon);

/**
 * Renyi-accountant epsilon for a single mechanism; an independent, looser
 * cross-check of `spt_accountant_epsilon`.
 *
 * # Safety
 * `out_epsilon` must be writable.
 */
SptStatus spt_rdp_epsilon(double noise_multiplier,
                          double sampling_rate,
                          uint32_t steps,
                          double delta,
                          double *out_epsilon);

/**
 * Smallest noise multiplier meeting the (epsilon, delta) target for one
 * subsampled Gaussian mechanism.
 *
 * # Safety
 * `out_noise_multiplier` must be writable.
 */
SptStatus spt_calibrate_noise(double epsilon,
                              double delta,
                              double sampling_rate,
                              uint32_t steps,
                              double *out_noise_multiplier);

/**
 * Closed-form adaptive composition of two stage budgets with slack
 * `delta_slack`; writes the composed epsilon and delta.
 *
 * # Safety
 * `out_epsilon` and `out_delta` must be writable.
 */
SptStatus spt_advanced_compose(double epsilon1,
                               double delta1,
                               double epsilon2,
                               double delta2,
                               double delta_slack,
                               double *out_epsilon,
                               double *out_delta);

/**
 * Static description of a status code; never null.
 */
const char *spt_status_message(SptStatus status);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SELECTPT_H */

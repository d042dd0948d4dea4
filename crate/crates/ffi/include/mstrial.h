#ifndef MSTRIAL_H
#define MSTRIAL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible function.
 */
typedef enum MstStatus {
  MST_STATUS_OK = 0,
  MST_STATUS_NULL_POINTER = 1,
  MST_STATUS_INVALID_ARGUMENT = 2,
  MST_STATUS_NUMERICAL = 3,
  MST_STATUS_IO = 4,
  MST_STATUS_INTERNAL = 5,
} MstStatus;

/**
 * Boundary families for [`mst_design_boundaries`].
 */
typedef enum MstBoundary {
  MST_BOUNDARY_POCOCK = 0,
  MST_BOUNDARY_OBRIEN_FLEMING = 1,
} MstBoundary;

/**
 * Opaque patient cohort.
 */
typedef struct MstCohort MstCohort;

/**
 * Opaque multi-state model.
 */
typedef struct MstModel MstModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *mst_version(void);

/**
 * Message of the last failure on this thread, or null. Free with
 * [`mst_string_free`].
 */
char *mst_last_error_message(void);

/**
 * # Safety
 * `s` must come from this library or be null.
 */
void mst_string_free(char *s);

/**
 * Parses a model from JSON text.
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum MstStatus mst_model_from_json(const char *json, struct MstModel **out);

/**
 * # Safety
 * `model` must come from [`mst_model_from_json`] or be null.
 */
void mst_model_free(struct MstModel *model);

/**
 * Number of states of the model, 0 for a null handle.
 *
 * # Safety
 * `model` must be a live handle or null.
 */
size_t mst_model_state_count(const struct MstModel *model);

/**
 * Cumulative intensity of `from → to` over `(s1, s2]` in group `z`.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum MstStatus mst_model_cumulative_intensity(const struct MstModel *model,
                                              size_t from,
                                              size_t to,
                                              double s1,
                                              double s2,
                                              uint8_t z,
                                              double *out);

/**
 * Expected share of patients with an event in `states` by calendar time `t`
 * under uniform accrual over `accrual_duration`.
 *
 * # Safety
 * `states` must point to `n_states` entries and `out` be valid.
 */
enum MstStatus mst_model_expected_event_fraction(const struct MstModel *model,
                                                 const size_t *states,
                                                 size_t n_states,
                                                 double t,
                                                 double accrual_duration,
                                                 double allocation,
                                                 double *out);

/**
 * Loads a cohort from a transitions CSV and an optional roster CSV (null).
 *
 * # Safety
 * Paths must be NUL-terminated strings (roster may be null) and `out` valid.
 */
enum MstStatus mst_cohort_load(const char *transitions, const char *roster, struct MstCohort **out);

/**
 * Parses a cohort from CSV text; `roster` may be null.
 *
 * # Safety
 * Strings must be NUL-terminated (roster may be null) and `out` valid.
 */
enum MstStatus mst_cohort_from_csv(const char *transitions,
                                   const char *roster,
                                   struct MstCohort **out);

/**
 * # Safety
 * `cohort` must come from this library or be null.
 */
void mst_cohort_free(struct MstCohort *cohort);

/**
 * Number of patients, 0 for a null handle.
 *
 * # Safety
 * `cohort` must be a live handle or null.
 */
size_t mst_cohort_len(const struct MstCohort *cohort);

/**
 * Stage statistic of the increment over `(t_prev, t_now]`.
 *
 * Events are given as concatenated state lists: event `c` owns the next
 * `event_sizes[c]` entries of `event_states`. `all_entries` selects counting
 * every entry instead of the first one.
 *
 * # Safety
 * Arrays must hold the stated number of entries; outputs may be null.
 */
enum MstStatus mst_stage_statistic(const struct MstCohort *cohort,
                                   const size_t *event_states,
                                   const size_t *event_sizes,
                                   size_t n_events,
                                   bool all_entries,
                                   double t_prev,
                                   double t_now,
                                   double *statistic,
                                   double *p_value,
                                   size_t *rank);

/**
 * Critical values of the normalised inverse normal statistic for `stages`
 * equally weighted stages, written to `critical[0..stages]`.
 *
 * # Safety
 * `critical` must have room for `stages` values.
 */
enum MstStatus mst_design_boundaries(enum MstBoundary family,
                                     double alpha,
                                     size_t stages,
                                     double *critical);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MSTRIAL_H */

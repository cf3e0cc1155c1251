#ifndef TAILATLAS_H
#define TAILATLAS_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TaStatus {
  TA_STATUS_OK = 0,
  TA_STATUS_NULL_POINTER = 1,
  TA_STATUS_INVALID_UTF8 = 2,
  TA_STATUS_INVALID_CONFIG = 3,
  TA_STATUS_HYPOTHESIS_NOT_MET = 4,
  TA_STATUS_INCONCLUSIVE = 5,
  TA_STATUS_CERTIFICATION_FAILED = 6,
  TA_STATUS_LORENTZ = 7,
  TA_STATUS_ENGINE = 8,
  TA_STATUS_PANIC = 9,
} TaStatus;

/**
 * A scatterer configuration.
 */
typedef struct TaLorentz TaLorentz;

/**
 * A finished run.
 */
typedef struct TaReport TaReport;

/**
 * Line element in flat form. `cell[1]` is 0 for tubes.
 */
typedef struct TaLineElement {
  uint32_t scatterer;
  int64_t cell[2];
  double theta;
  double velocity[2];
} TaLineElement;

/**
 * Result of one collision step.
 */
typedef struct TaCollision {
  struct TaLineElement next;
  int64_t displacement[2];
  double flight_time;
} TaCollision;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread. Valid until the next
 * failing call on the same thread; empty when nothing failed.
 */
const char *ta_last_error(void);

/**
 * Library version, static storage.
 */
const char *ta_version(void);

/**
 * Parses a JSON run config and executes it.
 *
 * # Safety
 * `config_json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum TaStatus ta_run(const char *config_json, struct TaReport **out);

/**
 * Report JSON owned by the handle.
 *
 * # Safety
 * `report` must come from [`ta_run`] and not be freed.
 */
const char *ta_report_json(const struct TaReport *report);

/**
 * 0 when every check passed, 2 otherwise, -1 for a null handle.
 *
 * # Safety
 * `report` must come from [`ta_run`] and not be freed.
 */
int32_t ta_report_exit_code(const struct TaReport *report);

/**
 * # Safety
 * `report` must come from [`ta_run`] or be null.
 */
void ta_report_free(struct TaReport *report);

/**
 * Opens a named preset, e.g. `"finite-horizon-square"`.
 *
 * # Safety
 * `name` must be a NUL-terminated string and `out` a valid pointer.
 */
enum TaStatus ta_lorentz_preset(const char *name, struct TaLorentz **out);

/**
 * Opens a table given as JSON.
 *
 * # Safety
 * `table_json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum TaStatus ta_lorentz_from_json(const char *table_json, struct TaLorentz **out);

/**
 * Draws a line element from the invariant measure.
 *
 * # Safety
 * `table` must be a live handle and `out` a valid pointer.
 */
enum TaStatus ta_lorentz_sample(const struct TaLorentz *table,
                                uint64_t seed,
                                uint64_t index,
                                struct TaLineElement *out);

/**
 * Advances one collision.
 *
 * # Safety
 * `table` must be a live handle; `state` and `out` valid pointers.
 */
enum TaStatus ta_lorentz_step(const struct TaLorentz *table,
                              const struct TaLineElement *state,
                              struct TaCollision *out);

/**
 * # Safety
 * `table` must come from a `ta_lorentz_*` constructor or be null.
 */
void ta_lorentz_free(struct TaLorentz *table);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TAILATLAS_H */

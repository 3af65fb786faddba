#ifndef RNB_H
#define RNB_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes mirroring the CLI exit-code contract.
 */
typedef enum RnbStatus {
  RnbStatus_Ok = 0,
  /**
   * null pointer, invalid UTF-8, or an internal panic
   */
  RnbStatus_InvalidArgument = 1,
  /**
   * scene parse or validation failure
   */
  RnbStatus_Validation = 2,
  /**
   * non-finite gradient
   */
  RnbStatus_Numerical = 3,
  RnbStatus_Io = 4,
} RnbStatus;

/**
 * Opaque loaded-and-validated scene handle.
 */
typedef struct RnbScene RnbScene;

/**
 * Result block filled by `rnb_gradcheck`.
 */
typedef struct RnbGradCheckResult {
  double max_abs_error;
  double max_rel_error;
  uint64_t compared;
  uint64_t skipped_nonsmooth;
} RnbGradCheckResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent failure on this thread. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *rnb_last_error_message(void);

/**
 * Loads and validates a scene JSON file. On success writes a handle the
 * caller must release with `rnb_scene_free`.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string; `out_scene` must be a valid
 * pointer.
 */
enum RnbStatus rnb_scene_load(const char *path, struct RnbScene **out_scene);

/**
 * Releases a scene handle. Null is ignored.
 *
 * # Safety
 * `scene` must be a handle from `rnb_scene_load` not yet freed, or null.
 */
void rnb_scene_free(struct RnbScene *scene);

/**
 * Number of concepts in a loaded scene; 0 for a null handle.
 *
 * # Safety
 * `scene` must be a live handle or null.
 */
uint64_t rnb_scene_concept_count(const struct RnbScene *scene);

/**
 * Runs one experiment, writing metrics.csv / report.json (and map dumps when
 * `dump_maps`) under `out_dir`. `ablate` is an optional comma-separated flag
 * list (may be null). On success writes the final mIoU to `out_final_miou`
 * when non-null.
 *
 * # Safety
 * `scene` must be a live handle; `out_dir` a valid NUL-terminated string;
 * `ablate` a valid string or null; `out_final_miou` a valid pointer or null.
 */
enum RnbStatus rnb_run_experiment(const struct RnbScene *scene,
                                  const char *out_dir,
                                  bool dump_maps,
                                  const char *ablate,
                                  double *out_final_miou);

/**
 * Finite-difference checks the full guidance energy on a seeded random
 * scene and fills `out`.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum RnbStatus rnb_gradcheck(uint64_t seed, uint64_t probes, struct RnbGradCheckResult *out);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* RNB_H */

#ifndef SPHDIFF_H
#define SPHDIFF_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Doubles per pose.
 */
#define SPHDIFF_POSE_LEN 13

typedef enum SphdiffStatus {
  SPHDIFF_STATUS_OK = 0,
  SPHDIFF_STATUS_NULL_POINTER = 1,
  SPHDIFF_STATUS_INVALID_ARGUMENT = 2,
  SPHDIFF_STATUS_CONFIG = 3,
  SPHDIFF_STATUS_IO = 4,
  SPHDIFF_STATUS_CHECKPOINT = 5,
  SPHDIFF_STATUS_DEGENERATE_ROTATION = 6,
  SPHDIFF_STATUS_BUFFER_TOO_SMALL = 7,
  SPHDIFF_STATUS_PANIC = 8,
} SphdiffStatus;

/**
 * Trained policy: configuration plus parameters.
 */
typedef struct SphdiffPolicy SphdiffPolicy;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * Valid until the next call on this thread.
 */
const char *sphdiff_last_error(void);

/**
 * Library version, static storage.
 */
const char *sphdiff_version(void);

/**
 * Writes the `(2l+1)²` Wigner matrix of degree `l` for the row-major
 * rotation `rot` into `out`, row-major.
 *
 * # Safety
 * `rot` must point to 9 doubles and `out` to `out_len` writable doubles.
 */
enum SphdiffStatus sphdiff_wigner_d(uint32_t l, const double *rot, double *out, size_t out_len);

/**
 * Runs the invariant suite with default trial counts; `*passed` is 1 when
 * every check passes. `report_path` (nullable) receives the JSON report.
 *
 * # Safety
 * `passed` must be writable; `report_path` null or a C string.
 */
enum SphdiffStatus sphdiff_verify(uint64_t seed, const char *report_path, int32_t *passed);

/**
 * Writes `n` demonstrations of the default task (or the TOML task at
 * `spec_path`, nullable) to `out_path` as JSON Lines.
 *
 * # Safety
 * `out_path` must be a C string; `spec_path` null or a C string.
 */
enum SphdiffStatus sphdiff_gen_demos(const char *spec_path,
                                     size_t n,
                                     uint64_t seed,
                                     const char *out_path);

/**
 * Loads a checkpoint. `config_path` may be null to use the resolved config
 * stored next to the checkpoint. On success `*out` owns a new handle.
 *
 * # Safety
 * `ckpt_path` must be a C string, `config_path` null or a C string, `out`
 * writable.
 */
enum SphdiffStatus sphdiff_policy_load(const char *ckpt_path,
                                       const char *config_path,
                                       struct SphdiffPolicy **out);

/**
 * Releases a handle; null is ignored.
 *
 * # Safety
 * `policy` must come from [`sphdiff_policy_load`] and not be used again.
 */
void sphdiff_policy_free(struct SphdiffPolicy *policy);

/**
 * Frames the policy conditions on and steps it returns per call.
 *
 * # Safety
 * `policy` must be a live handle; `history` and `horizon` writable.
 */
enum SphdiffStatus sphdiff_policy_shape(const struct SphdiffPolicy *policy,
                                        size_t *history,
                                        size_t *horizon);

/**
 * Samples an action chunk. The point cloud (`n_points` xyz and rgb
 * triples) is shared by all `n_frames` frames, whose gripper poses are in
 * `frames` (`n_frames × 13`, oldest first); `n_frames` must equal the
 * policy history. `out` receives `horizon × 13` doubles in world frame.
 * The same `seed` gives the same chunk.
 *
 * # Safety
 * All pointers must reference the stated number of doubles.
 */
enum SphdiffStatus sphdiff_policy_act(const struct SphdiffPolicy *policy,
                                      const double *points,
                                      const double *colors,
                                      size_t n_points,
                                      const double *frames,
                                      size_t n_frames,
                                      uint64_t seed,
                                      double *out,
                                      size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPHDIFF_H */

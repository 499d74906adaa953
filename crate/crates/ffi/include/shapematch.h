#ifndef SHAPEMATCH_H
#define SHAPEMATCH_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum SmStatus {
  SM_OK = 0,
  SM_ERR_NULL_POINTER = 1,
  SM_ERR_INVALID_ARGUMENT = 2,
  SM_ERR_INVALID_CONFIG = 3,
  SM_ERR_IO = 4,
  SM_ERR_PARSE = 5,
  SM_ERR_OUT_OF_VIEW = 6,
  SM_ERR_SOLVER = 7,
  SM_ERR_PANIC = 8,
} SmStatus;

/**
 * Opaque mesh handle.
 */
typedef struct SmMesh SmMesh;

/**
 * Opaque refinement result.
 */
typedef struct SmTrace SmTrace;

/**
 * Row-major rotation and translation, model to camera.
 */
typedef struct SmPose {
  double rotation[9];
  double translation[3];
} SmPose;

typedef struct SmIntrinsics {
  double fx;
  double fy;
  double cx;
  double cy;
  uint32_t width;
  uint32_t height;
} SmIntrinsics;

typedef struct SmMetrics {
  double add;
  double adds;
  double diameter;
  double rotation_error_deg;
  double translation_error;
  bool add_pass_01d;
  bool add_pass_005d;
} SmMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *sm_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *sm_version(void);

/**
 * Loads a builtin mesh (`checker_cube`, `icosphere`, `tetra`) or an ASCII PLY file.
 *
 * # Safety
 * `source` must be a NUL-terminated string; `out` must be writable.
 */
enum SmStatus sm_mesh_load(const char *source, struct SmMesh **out);

/**
 * # Safety
 * `mesh` must come from [`sm_mesh_load`] and not be used afterwards. NULL is a no-op.
 */
void sm_mesh_free(struct SmMesh *mesh);

/**
 * Mesh diameter in meters, or a negative value for NULL.
 *
 * # Safety
 * `mesh` must be NULL or a live handle.
 */
double sm_mesh_diameter(const struct SmMesh *mesh);

/**
 * Renders `mesh` at `pose`. Each output buffer is optional (NULL skips it);
 * sizes are `3·w·h` floats for RGB, `w·h` bytes for the mask and `w·h`
 * doubles for depth (`+inf` off the object).
 *
 * # Safety
 * Non-NULL buffers must hold the stated number of elements.
 */
enum SmStatus sm_render(const struct SmMesh *mesh,
                        const struct SmPose *pose,
                        const struct SmIntrinsics *intrinsics,
                        float *rgb_out,
                        uint8_t *mask_out,
                        double *depth_out);

/**
 * Pose-induced flow from `pose_a` to `pose_b` over the render at `pose_a`:
 * `2·w·h` floats (dx, dy interleaved) and `w·h` validity bytes.
 *
 * # Safety
 * Buffers must hold the stated number of elements.
 */
enum SmStatus sm_pose_flow(const struct SmMesh *mesh,
                           const struct SmPose *pose_a,
                           const struct SmPose *pose_b,
                           const struct SmIntrinsics *intrinsics,
                           float *flow_out,
                           uint8_t *valid_out);

/**
 * Refines `init` against an RGB image (`3·w·h` floats in [0, 1], row-major,
 * sized by `intrinsics`). `config_json` may be NULL for defaults.
 *
 * # Safety
 * `rgb` must hold `3·w·h` floats; `out` must be writable.
 */
enum SmStatus sm_refine(const struct SmMesh *mesh,
                        const float *rgb,
                        const struct SmIntrinsics *intrinsics,
                        const struct SmPose *init,
                        const char *config_json,
                        struct SmTrace **out);

/**
 * # Safety
 * `trace` must come from [`sm_refine`] and not be used afterwards. NULL is a no-op.
 */
void sm_trace_free(struct SmTrace *trace);

/**
 * Completed iterations (fewer than configured if a solve failed).
 *
 * # Safety
 * `trace` must be NULL or a live handle.
 */
size_t sm_trace_iterations(const struct SmTrace *trace);

/**
 * Pose after `k` iterations; `k = 0` is the initial pose.
 *
 * # Safety
 * `trace` must be a live handle and `out` writable.
 */
enum SmStatus sm_trace_pose(const struct SmTrace *trace, size_t k, struct SmPose *out);

/**
 * True when a solver failure cut the trace short.
 *
 * # Safety
 * `trace` must be NULL or a live handle.
 */
bool sm_trace_failed(const struct SmTrace *trace);

/**
 * ADD / ADD-S and pose errors of `pred` against `gt`.
 *
 * # Safety
 * Pointers must be valid; `out` writable.
 */
enum SmStatus sm_evaluate(const struct SmMesh *mesh,
                          const struct SmPose *gt,
                          const struct SmPose *pred,
                          struct SmMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SHAPEMATCH_H */

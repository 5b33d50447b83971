#ifndef LATENTWARP_H
#define LATENTWARP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum LwBoundary {
  LW_BOUNDARY_CLAMP = 0,
  LW_BOUNDARY_WRAP = 1,
} LwBoundary;

typedef enum LwStatus {
  LW_STATUS_OK = 0,
  LW_STATUS_NULL_ARGUMENT = 1,
  LW_STATUS_INVALID_ARGUMENT = 2,
  LW_STATUS_FORMAT = 3,
  LW_STATUS_IO = 4,
  LW_STATUS_SEQUENCING = 5,
  LW_STATUS_CONTRACT = 6,
  LW_STATUS_PANIC = 7,
} LwStatus;

// Frames plus flows in both directions.
typedef struct LwBundle LwBundle;

// A per-pixel displacement field.
typedef struct LwFlow LwFlow;

// A `channels x height x width` float grid.
typedef struct LwGrid LwGrid;

// A binary decision mask.
typedef struct LwMask LwMask;

// Output of a full pipeline run.
typedef struct LwRun LwRun;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *lw_version(void);

// Message for the most recent failure on this thread, or null. The pointer
// stays valid until the next failing call on the same thread.
const char *lw_last_error_message(void);

// Creates a grid from `channels * height * width` floats in channel-major order.
//
// # Safety
// `data` must point to `len` readable floats; `out_grid` must be writable.
enum LwStatus lw_grid_new(size_t channels,
                          size_t height,
                          size_t width,
                          const float *data,
                          size_t len,
                          struct LwGrid **out_grid);

// # Safety
// `grid` must come from this library and not be used afterwards.
void lw_grid_free(struct LwGrid *grid);

// # Safety
// `grid` must be valid; the output pointers must be writable.
enum LwStatus lw_grid_dims(const struct LwGrid *grid,
                           size_t *channels,
                           size_t *height,
                           size_t *width);

// Copies the grid values into `buffer`, which must hold exactly
// `channels * height * width` floats.
//
// # Safety
// `buffer` must point to `len` writable floats.
enum LwStatus lw_grid_copy_data(const struct LwGrid *grid, float *buffer, size_t len);

// # Safety
// `path` must be a NUL-terminated string; `out_grid` must be writable.
enum LwStatus lw_grid_read_tensor(const char *path, struct LwGrid **out_grid);

// # Safety
// `grid` must be valid; `path` must be a NUL-terminated string.
enum LwStatus lw_grid_write_tensor(const struct LwGrid *grid, const char *path);

// Creates a flow from separate horizontal and vertical components of
// `height * width` floats each.
//
// # Safety
// `u` and `v` must each point to `len` readable floats.
enum LwStatus lw_flow_new(size_t height,
                          size_t width,
                          const float *u,
                          const float *v,
                          size_t len,
                          struct LwFlow **out_flow);

// # Safety
// `flow` must come from this library and not be used afterwards.
void lw_flow_free(struct LwFlow *flow);

// # Safety
// `flow` must be valid; the output pointers must be writable.
enum LwStatus lw_flow_dims(const struct LwFlow *flow, size_t *height, size_t *width);

// # Safety
// `u` and `v` must each point to `len` writable floats.
enum LwStatus lw_flow_copy_data(const struct LwFlow *flow, float *u, float *v, size_t len);

// Reads a Middlebury `.flo` file.
//
// # Safety
// `path` must be a NUL-terminated string; `out_flow` must be writable.
enum LwStatus lw_flow_read_flo(const char *path, struct LwFlow **out_flow);

// # Safety
// `flow` must be valid; `path` must be a NUL-terminated string.
enum LwStatus lw_flow_write_flo(const struct LwFlow *flow, const char *path);

// Bilinear pull of `source` along `flow`.
//
// # Safety
// Handles must be valid; `out_grid` must be writable.
enum LwStatus lw_backward_warp(const struct LwGrid *source,
                               const struct LwFlow *flow,
                               enum LwBoundary boundary,
                               struct LwGrid **out_grid);

// Bilinear push of `source` along `flow`, summing overlaps.
//
// # Safety
// Handles must be valid; `out_grid` must be writable.
enum LwStatus lw_forward_splat(const struct LwGrid *source,
                               const struct LwFlow *flow,
                               enum LwBoundary boundary,
                               struct LwGrid **out_grid);

// One-channel occupancy of the current frame for a previous-to-current flow.
//
// # Safety
// `flow` must be valid; `out_grid` must be writable.
enum LwStatus lw_occlusion_map(const struct LwFlow *flow_prev_to_cur,
                               enum LwBoundary boundary,
                               struct LwGrid **out_grid);

// Thresholds one-channel occlusion and residual grids into a mask.
//
// # Safety
// Handles must be valid; `out_mask` must be writable.
enum LwStatus lw_binary_mask(const struct LwGrid *occlusion,
                             const struct LwGrid *residual,
                             float alpha,
                             float threshold,
                             struct LwMask **out_mask);

// Pools a pixel mask to latent resolution.
//
// # Safety
// `mask` must be valid; `out_mask` must be writable.
enum LwStatus lw_mask_to_latent(const struct LwMask *mask, size_t factor, struct LwMask **out_mask);

// # Safety
// `mask` must come from this library and not be used afterwards.
void lw_mask_free(struct LwMask *mask);

// # Safety
// `mask` must be valid; the output pointers must be writable.
enum LwStatus lw_mask_dims(const struct LwMask *mask, size_t *height, size_t *width, size_t *ones);

// Writes one byte per cell, 0 or 1, in row-major order.
//
// # Safety
// `buffer` must point to `len` writable bytes.
enum LwStatus lw_mask_copy_bits(const struct LwMask *mask, uint8_t *buffer, size_t len);

// Generates a synthetic sequence from `key=value` scene text.
//
// # Safety
// `spec` must be a NUL-terminated string; `out_bundle` must be writable.
enum LwStatus lw_bundle_synth(const char *spec, struct LwBundle **out_bundle);

// # Safety
// `bundle` must come from this library and not be used afterwards.
void lw_bundle_free(struct LwBundle *bundle);

// # Safety
// `bundle` must be valid; `frames` must be writable.
enum LwStatus lw_bundle_len(const struct LwBundle *bundle, size_t *frames);

// Translates the key frames of `bundle`. `config` holds `key=value`
// pipeline settings and may be null for defaults.
//
// # Safety
// `bundle` must be valid; `config` must be null or NUL-terminated;
// `out_run` must be writable.
enum LwStatus lw_run_video(const struct LwBundle *bundle,
                           const char *config,
                           struct LwRun **out_run);

// # Safety
// `run` must come from this library and not be used afterwards.
void lw_run_free(struct LwRun *run);

// Number of translated key frames.
//
// # Safety
// `run` must be valid; `count` must be writable.
enum LwStatus lw_run_len(const struct LwRun *run, size_t *count);

// Source frame index and aligned step count of the `i`-th key frame.
//
// # Safety
// `run` must be valid; the output pointers must be writable.
enum LwStatus lw_run_key_frame(const struct LwRun *run,
                               size_t i,
                               size_t *frame_index,
                               size_t *aligned_steps);

// Final latent of the `i`-th key frame.
//
// # Safety
// `run` must be valid; `out_grid` must be writable.
enum LwStatus lw_run_latent(const struct LwRun *run, size_t i, struct LwGrid **out_grid);

// Decoded, 8-bit quantized output frame of the `i`-th key frame.
//
// # Safety
// `run` must be valid; `out_grid` must be writable.
enum LwStatus lw_run_frame(const struct LwRun *run, size_t i, struct LwGrid **out_grid);

// Mean warp error and token consistency of the run. Values that are
// undefined (fewer than two key frames) are reported as NaN.
//
// # Safety
// `run` must be valid; the output pointers must be writable.
enum LwStatus lw_run_metrics(const struct LwRun *run,
                             double *warp_error,
                             double *masked_warp_error,
                             double *token_consistency);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LATENTWARP_H */

#ifndef REID_ANNOTATE_H
#define REID_ANNOTATE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum RaStatus {
  RA_STATUS_OK = 0,
  RA_STATUS_NULL_ARGUMENT = 1,
  RA_STATUS_INVALID_ARGUMENT = 2,
  RA_STATUS_IO = 3,
  RA_STATUS_PARSE = 4,
  RA_STATUS_CONFIG = 5,
  RA_STATUS_RUN = 6,
  RA_STATUS_PANIC = 7,
} RaStatus;

typedef enum RaStop {
  RA_STOP_RUNNING = 0,
  RA_STOP_MAX_ITERATIONS = 1,
  RA_STOP_POOLS_EXHAUSTED = 2,
  RA_STOP_NO_GAIN = 3,
} RaStop;

typedef struct RaEngine RaEngine;

typedef struct RaManifest RaManifest;

/**
 * Latest metrics row. Missing values are NaN.
 */
typedef struct RaMetrics {
  uint32_t iteration;
  uint64_t tp_manual;
  uint64_t auto_count;
  double ar;
  double gained_tp_ratio;
  double rank1;
  double map;
} RaMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` and returns
 * the buffer size needed including the terminating NUL, or 0 if the last
 * call succeeded. Pass a null `buf` to query the size.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t ra_last_error(char *buf, size_t len);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum RaStatus ra_manifest_load(const char *path, struct RaManifest **out);

/**
 * Generates the 200-identity, 2-camera benchmark dataset.
 *
 * # Safety
 * `out` must be writable.
 */
enum RaStatus ra_manifest_benchmark(uint64_t seed, struct RaManifest **out);

/**
 * # Safety
 * `manifest` must come from this library; `out` must be writable.
 */
enum RaStatus ra_manifest_tracklet_count(const struct RaManifest *manifest, size_t *out);

/**
 * # Safety
 * `manifest` must be null or a handle not yet freed.
 */
void ra_manifest_free(struct RaManifest *manifest);

/**
 * Starts a simulated run. `config` holds `key = value` lines and may be
 * null for defaults; `out_dir` may be null to keep the run in memory.
 *
 * # Safety
 * String arguments must be null or NUL-terminated; `out` must be writable.
 */
enum RaStatus ra_engine_new(const struct RaManifest *manifest,
                            const char *config,
                            const char *out_dir,
                            struct RaEngine **out);

/**
 * Runs one iteration. `stop` (optional) reports whether the run has ended.
 *
 * # Safety
 * `engine` must be a live handle; `metrics_out` and `stop` null or writable.
 */
enum RaStatus ra_engine_step(struct RaEngine *engine,
                             struct RaMetrics *metrics_out,
                             enum RaStop *stop);

/**
 * Iterates until a stopping rule fires.
 *
 * # Safety
 * `engine` must be a live handle; `stop` null or writable.
 */
enum RaStatus ra_engine_run(struct RaEngine *engine, enum RaStop *stop);

/**
 * Metrics of the last finished iteration; all zero/NaN before the first.
 *
 * # Safety
 * `engine` must be a live handle; `out` writable.
 */
enum RaStatus ra_engine_latest(const struct RaEngine *engine, struct RaMetrics *out);

/**
 * # Safety
 * `engine` must be null or a handle not yet freed.
 */
void ra_engine_free(struct RaEngine *engine);

/**
 * Mean of the `k` smallest image-pair distances between two tracklets
 * given as row-major `rows x dim` feature blocks.
 *
 * # Safety
 * `p` and `q` must point to `p_rows * dim` and `q_rows * dim` doubles.
 */
enum RaStatus ra_set_to_set_distance(const double *p,
                                     size_t p_rows,
                                     const double *q,
                                     size_t q_rows,
                                     size_t dim,
                                     size_t k,
                                     double *out);

/**
 * Monte Carlo estimate of the pairwise annotations a full manual pass
 * would need, from per-tracklet identities.
 *
 * # Safety
 * `identities` must point to `len` values; `mean` and `std` writable.
 */
enum RaStatus ra_estimate_t_pa(const uint32_t *identities,
                               size_t len,
                               size_t runs,
                               uint64_t seed,
                               double *mean,
                               double *std);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* REID_ANNOTATE_H */

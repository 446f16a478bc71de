#ifndef MVREF_H
#define MVREF_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MvrefStatus {
  MVREF_STATUS_OK = 0,
  MVREF_STATUS_NULL_POINTER = 1,
  MVREF_STATUS_INVALID_ARGUMENT = 2,
  MVREF_STATUS_DIMENSION_MISMATCH = 3,
  MVREF_STATUS_INVALID_CONFIG = 4,
  MVREF_STATUS_ZERO_EMBEDDING = 5,
  MVREF_STATUS_INTERNAL = 99,
} MvrefStatus;

/**
 * Opaque binary region mask.
 */
typedef struct MvrefRegionMask MvrefRegionMask;

/**
 * Opaque RoPE configuration.
 */
typedef struct MvrefRopeConfig MvrefRopeConfig;

typedef struct MvrefPose {
  double yaw;
  double pitch;
  double roll;
} MvrefPose;

typedef struct MvrefTrajectoryStats {
  double dispersion;
  double smoothness;
  double max_jump;
  size_t collapse_segments;
} MvrefTrajectoryStats;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full message length, 0 when none.
 *
 * # Safety
 * `buf` must be null or writable for `len` bytes.
 */
size_t mvref_last_error(char *buf, size_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *mvref_version(void);

/**
 * Creates a RoPE configuration. `base <= 0` keeps the default base.
 *
 * # Safety
 * `out` must be writable.
 */
enum MvrefStatus mvref_rope_config_new(size_t head_dim,
                                       size_t grid_h,
                                       size_t grid_w,
                                       size_t num_refs,
                                       double base,
                                       uint32_t temporal_offset,
                                       struct MvrefRopeConfig **out);

/**
 * # Safety
 * `cfg` must be null or a handle from [`mvref_rope_config_new`], freed once.
 */
void mvref_rope_config_free(struct MvrefRopeConfig *cfg);

/**
 * RoPE attention score between `q` at `pos_i` and `k` at `pos_j`, each
 * position given as `(frame, row, col)`.
 *
 * # Safety
 * `q` and `k` hold `dim` values, positions hold 3, `out` is writable.
 */
enum MvrefStatus mvref_rope_score(const struct MvrefRopeConfig *cfg,
                                  const double *q,
                                  const double *k,
                                  size_t dim,
                                  const uint32_t *pos_i,
                                  const uint32_t *pos_j,
                                  double *out);

/**
 * Seeded mask over an `height x width` grid with `round(ratio * N)` zeros.
 *
 * # Safety
 * `out` must be writable.
 */
enum MvrefStatus mvref_region_mask_generate(size_t height,
                                            size_t width,
                                            double ratio,
                                            uint64_t seed,
                                            struct MvrefRegionMask **out);

/**
 * # Safety
 * `mask` must be null or a live mask handle, freed once.
 */
void mvref_region_mask_free(struct MvrefRegionMask *mask);

/**
 * Number of masked (zero) cells, or 0 for a null handle.
 *
 * # Safety
 * `mask` must be null or a live mask handle.
 */
size_t mvref_region_mask_zero_count(const struct MvrefRegionMask *mask);

/**
 * Copies the row-major keep bits (1 keep, 0 masked) into `out`, which
 * holds `len = height * width` bytes.
 *
 * # Safety
 * `mask` must be a live handle and `out` writable for `len` bytes.
 */
enum MvrefStatus mvref_region_mask_bits(const struct MvrefRegionMask *mask,
                                        uint8_t *out,
                                        size_t len);

/**
 * Index of the reference pose closest to `anchor`.
 *
 * # Safety
 * `refs` holds `n` poses and `out` is writable.
 */
enum MvrefStatus mvref_match_reference_view(struct MvrefPose anchor,
                                            const struct MvrefPose *refs,
                                            size_t n,
                                            size_t *out);

/**
 * Identity consistency of one frame embedding against `k` reference
 * embeddings stored row-major in `refs` (`k * dim` values).
 *
 * # Safety
 * `frame` holds `dim` values, `refs` holds `k * dim`, `out` is writable.
 */
enum MvrefStatus mvref_mvrc_frame(const double *frame,
                                  const double *refs,
                                  size_t k,
                                  size_t dim,
                                  double *out);

/**
 * Statistics of the facial-direction trajectory of `n` poses (degrees).
 *
 * # Safety
 * `poses` holds `n` poses and `out` is writable.
 */
enum MvrefStatus mvref_trajectory_stats(const struct MvrefPose *poses,
                                        size_t n,
                                        double cone_deg,
                                        size_t min_run,
                                        struct MvrefTrajectoryStats *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MVREF_H */

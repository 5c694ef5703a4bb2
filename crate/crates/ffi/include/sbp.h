#ifndef SBP_H
#define SBP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum SbpStatus {
  SBP_STATUS_OK = 0,
  SBP_STATUS_NULL_POINTER = 1,
  SBP_STATUS_CONFIG = 2,
  SBP_STATUS_DIMENSION = 3,
  SBP_STATUS_INDEX = 4,
  SBP_STATUS_NON_FINITE = 5,
  SBP_STATUS_CONTRACT = 6,
  SBP_STATUS_IO = 7,
  SBP_STATUS_INVALID_UTF8 = 8,
  SBP_STATUS_PANIC = 9,
} SbpStatus;

typedef enum SbpDropMode {
  SBP_DROP_MODE_QUERY_ONLY = 0,
  SBP_DROP_MODE_QKV = 1,
  SBP_DROP_MODE_HEAD = 2,
} SbpDropMode;

typedef enum SbpScheduleKind {
  SBP_SCHEDULE_KIND_UNIFORM = 0,
  SBP_SCHEDULE_KIND_INCREASING = 1,
  SBP_SCHEDULE_KIND_DECREASING = 2,
} SbpScheduleKind;

/*
 Opaque keep/drop partition of an index grid.
 */
typedef struct SbpMask SbpMask;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or NULL. Free with
 [`sbp_string_free`].
 */
char *sbp_last_error_message(void);

/*
 # Safety
 `s` must be NULL or a string returned by this library, not yet freed.
 */
void sbp_string_free(char *s);

/*
 Grid (lattice) mask over a `dims[0] × … × dims[ndim-1]` grid keeping
 `keep_num/keep_den` of the positions.

 # Safety
 `dims` must point to `ndim` values; `out` must be writable.
 */
enum SbpStatus sbp_mask_grid(const size_t *dims,
                             size_t ndim,
                             uint64_t keep_num,
                             uint64_t keep_den,
                             uint64_t seed,
                             struct SbpMask **out);

/*
 Uniformly random mask with exactly `keep_num/keep_den` of the positions kept.

 # Safety
 As for [`sbp_mask_grid`].
 */
enum SbpStatus sbp_mask_random(const size_t *dims,
                               size_t ndim,
                               uint64_t keep_num,
                               uint64_t keep_den,
                               uint64_t seed,
                               struct SbpMask **out);

/*
 Mask keeping the listed row-major indices.

 # Safety
 `dims` must point to `ndim` values and `keep` to `n_keep` values.
 */
enum SbpStatus sbp_mask_from_keep(const size_t *dims,
                                  size_t ndim,
                                  const size_t *keep,
                                  size_t n_keep,
                                  struct SbpMask **out);

/*
 Keeps positions kept by both `a` and `b`.

 # Safety
 `a` and `b` must be live masks from this library.
 */
enum SbpStatus sbp_mask_intersect(const struct SbpMask *a,
                                  const struct SbpMask *b,
                                  struct SbpMask **out);

/*
 Number of grid positions; 0 for NULL.

 # Safety
 `m` must be NULL or a live mask.
 */
size_t sbp_mask_total(const struct SbpMask *m);

/*
 Number of kept positions; 0 for NULL.

 # Safety
 `m` must be NULL or a live mask.
 */
size_t sbp_mask_keep_count(const struct SbpMask *m);

/*
 Copies the sorted kept indices into `buf`. `*written` receives the kept
 count even when `cap` is too small (then `SBP_STATUS_DIMENSION`).

 # Safety
 `buf` must have room for `cap` values; `written` must be writable.
 */
enum SbpStatus sbp_mask_keep_indices(const struct SbpMask *m,
                                     size_t *buf,
                                     size_t cap,
                                     size_t *written);

/*
 Text form of the mask; free with [`sbp_string_free`].

 # Safety
 `m` must be a live mask; `out` must be writable.
 */
enum SbpStatus sbp_mask_to_text(const struct SbpMask *m, char **out);

/*
 Parses the text form written by [`sbp_mask_to_text`].

 # Safety
 `text` must be a NUL-terminated string; `out` must be writable.
 */
enum SbpStatus sbp_mask_from_text(const char *text, struct SbpMask **out);

/*
 # Safety
 `m` must be NULL or a mask from this library, not yet freed.
 */
void sbp_mask_free(struct SbpMask *m);

/*
 Cached-activation ratio of an attention layer under SBP with head width
 `head_dim` and `tokens` tokens. Head dropping has no analytic model.

 # Safety
 `out` must be writable.
 */
enum SbpStatus sbp_mhsa_memory_ratio(uint64_t keep_num,
                                     uint64_t keep_den,
                                     uint64_t head_dim,
                                     uint64_t tokens,
                                     enum SbpDropMode mode,
                                     double *out);

/*
 Writes `n_layers` per-layer keep ratios into `out` (room for `cap`).

 # Safety
 `out` must have room for `cap` values.
 */
enum SbpStatus sbp_build_schedule(enum SbpScheduleKind kind,
                                  uint64_t avg_num,
                                  uint64_t avg_den,
                                  size_t n_layers,
                                  double *out,
                                  size_t cap);

/*
 SBP backward of `y = x·w (+ b)` for row-major `x: rows × c_in`,
 `w: c_in × c_out` and upstream `up: rows × c_out`, where `rows` is a
 multiple of the mask's position count. Writes `dw` (`c_in × c_out`),
 `dx` (`rows × c_in`) and, when `db` is not NULL, `db` (`c_out`).
 Dropped rows of `x` and `up` are never read.

 # Safety
 Every non-NULL pointer must reference the number of values stated above.
 */
enum SbpStatus sbp_linear_backward_sbp(const double *x,
                                       size_t rows,
                                       size_t c_in,
                                       const double *w,
                                       size_t c_out,
                                       const double *up,
                                       const struct SbpMask *mask,
                                       double *dw,
                                       double *db,
                                       double *dx);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SBP_H */

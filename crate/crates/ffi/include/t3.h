#ifndef T3_H
#define T3_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum T3Status {
  T3_OK = 0,
  /**
   * A required pointer argument was null.
   */
  T3_ERR_NULL = 1,
  /**
   * Malformed argument: bad UTF-8, unknown name, mismatched lengths.
   */
  T3_ERR_INVALID = 2,
  /**
   * Inputs on which the metric is undefined, e.g. a single class.
   */
  T3_ERR_DEGENERATE = 3,
  /**
   * The challenge state does not allow the operation.
   */
  T3_ERR_STATE = 4,
  T3_ERR_FORBIDDEN = 5,
  T3_ERR_NOT_FOUND = 6,
  /**
   * A rolling submission arrived during the countdown.
   */
  T3_ERR_REJECTED = 7,
  T3_ERR_IO = 8,
  /**
   * A Rust panic was caught at the boundary.
   */
  T3_ERR_PANIC = 9,
} T3Status;

/**
 * Opaque challenge handle.
 */
typedef struct T3Challenge T3Challenge;

/**
 * Paired DeLong comparison of two score vectors.
 */
typedef struct T3Delong {
  double auc_a;
  double auc_b;
  double z;
  double p_value;
  /**
   * Non-zero when the pooled variance vanished while the AUCs differ.
   */
  uint8_t degenerate;
} T3Delong;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` (truncated,
 * always NUL-terminated) and returns the full message length, or 0 when
 * there is none.
 *
 * # Safety
 * `buf` is null or points to `len` writable bytes.
 */
size_t t3_last_error(char *buf, size_t len);

/**
 * Releases a string returned by this library.
 *
 * # Safety
 * `s` is null or came from this library and was not freed before.
 */
void t3_string_free(char *s);

/**
 * Midrank AUC of `scores` against binary `labels` (non-zero = positive).
 *
 * # Safety
 * `scores` and `labels` point to `n` values; `out` is writable.
 */
enum T3Status t3_auc(const double *scores, const uint8_t *labels, size_t n, double *out);

/**
 * Paired DeLong test of two score vectors over the same subjects.
 *
 * # Safety
 * `a`, `b` and `labels` point to `n` values; `out` is writable.
 */
enum T3Status t3_delong(const double *a,
                        const double *b,
                        const uint8_t *labels,
                        size_t n,
                        struct T3Delong *out);

/**
 * Percentile bootstrap interval (2.5th, 97.5th) of the AUC.
 *
 * # Safety
 * `scores` and `labels` point to `n` values; `lo` and `hi` are writable.
 */
enum T3Status t3_bootstrap_ci(const double *scores,
                              const uint8_t *labels,
                              size_t n,
                              size_t iterations,
                              uint64_t seed,
                              double *lo,
                              double *hi);

/**
 * Opens a challenge store created by `t3ctl init`. Adapters run in
 * process threads.
 *
 * # Safety
 * `path` is a NUL-terminated string; `out` is writable.
 */
enum T3Status t3_challenge_open(const char *path, struct T3Challenge **out);

/**
 * # Safety
 * `handle` is null or came from [`t3_challenge_open`] and was not freed.
 */
void t3_challenge_free(struct T3Challenge *handle);

/**
 * Phase, open rounds and team states as JSON.
 *
 * # Safety
 * `handle` is live; `out` is writable.
 */
enum T3Status t3_challenge_status_json(const struct T3Challenge *handle, char **out);

/**
 * Leaderboard `board` (`a1`, `a2`, `b`) as seen by `viewer_role`
 * (`organizer:<id>`, `team:<id>` or `anonymous`), as a JSON array.
 *
 * # Safety
 * `handle` is live; strings are NUL-terminated; `out` is writable.
 */
enum T3Status t3_challenge_leaderboard_json(const struct T3Challenge *handle,
                                            const char *board,
                                            const char *viewer_role,
                                            char **out);

/**
 * Submits `payload` for `team` to `target` (`rolling_a1`, `final_a2`,
 * `ft_round1`, `ft_feedback`, `ft_round2`). On success `out_submission_id`
 * receives the new submission id. A countdown rejection returns
 * [`T3Status::T3_ERR_REJECTED`] and writes the next allowed time to
 * `out_next_allowed_at` when it is non-null.
 *
 * # Safety
 * `handle` is live; strings are NUL-terminated; `out_submission_id` is
 * writable; `out_next_allowed_at` is null or writable.
 */
enum T3Status t3_challenge_submit(const struct T3Challenge *handle,
                                  const char *team,
                                  const char *target,
                                  const char *payload,
                                  uint8_t confirm_renounce,
                                  int64_t now,
                                  char **out_submission_id,
                                  int64_t *out_next_allowed_at);

/**
 * Runs every queued job at clock `now` and writes how many ran.
 *
 * # Safety
 * `handle` is live; `out_count` is null or writable.
 */
enum T3Status t3_challenge_run_pending(const struct T3Challenge *handle,
                                       int64_t now,
                                       size_t *out_count);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* T3_H */

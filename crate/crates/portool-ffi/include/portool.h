#ifndef PORTOOL_H
#define PORTOOL_H

/* Generated by cbindgen from portool-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code of every fallible FFI call.
 */
typedef enum PortoolStatus {
  PORTOOL_STATUS_OK = 0,
  /**
   * A required pointer argument was NULL.
   */
  PORTOOL_STATUS_NULL_POINTER = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  PORTOOL_STATUS_INVALID_UTF8 = 2,
  /**
   * The configuration failed to parse or validate.
   */
  PORTOOL_STATUS_INVALID_ARGUMENT = 3,
  /**
   * Training, evaluation or dumping failed; see `portool_last_error`.
   */
  PORTOOL_STATUS_RUN_FAILED = 4,
} PortoolStatus;

/**
 * Opaque experiment configuration handle.
 */
typedef struct PortoolConfig PortoolConfig;

/**
 * Final-round evaluation metrics of a run.
 */
typedef struct PortoolMetrics {
  /**
   * Training rounds completed (0 for a bare evaluation).
   */
  size_t rounds;
  double mean_outcome;
  double accuracy;
  double mean_steps;
  double unanswerable_rate;
  /**
   * Mean raw formatting rubric value in [0, 1].
   */
  double mean_fm;
} PortoolMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Last error message of this thread, empty until a call fails. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *portool_last_error(void);

/**
 * Library version as a static NUL-terminated string; never freed.
 */
const char *portool_version(void);

/**
 * New configuration handle with the library defaults. Never fails; release
 * with `portool_config_free`.
 */
struct PortoolConfig *portool_config_new(void);

/**
 * Parses a TOML document into a validated configuration handle; keys missing
 * from the document keep their defaults.
 *
 * # Safety
 * `text` must point to a NUL-terminated string and `out` to writable
 * pointer storage; both must stay valid for the duration of the call.
 */
enum PortoolStatus portool_config_from_toml(const char *text, struct PortoolConfig **out);

/**
 * Serializes a configuration to TOML. The returned string is owned by the
 * caller and must be released with `portool_string_free`.
 *
 * # Safety
 * `cfg` must be a live handle from this library and `out` writable pointer
 * storage.
 */
enum PortoolStatus portool_config_to_toml(const struct PortoolConfig *cfg, char **out);

/**
 * Releases a configuration handle. NULL is a no-op.
 *
 * # Safety
 * `cfg` must be NULL or an unreleased handle returned by this library.
 */
void portool_config_free(struct PortoolConfig *cfg);

/**
 * Releases a string returned by this library. NULL is a no-op.
 *
 * # Safety
 * `s` must be NULL or an unreleased string returned by this library.
 */
void portool_string_free(char *s);

/**
 * Trains a policy, writing config snapshot, metrics CSV and checkpoint into
 * `out_dir`. On success fills `out_metrics` (may be NULL) with the final
 * round's evaluation.
 *
 * # Safety
 * `cfg` must be a live handle, `out_dir` a NUL-terminated path, and
 * `out_metrics` NULL or writable.
 */
enum PortoolStatus portool_train(const struct PortoolConfig *cfg,
                                 const char *out_dir,
                                 struct PortoolMetrics *out_metrics);

/**
 * Evaluates a saved checkpoint on the configuration's eval split.
 *
 * # Safety
 * `cfg` must be a live handle, `params_path` a NUL-terminated path, and
 * `out_metrics` writable.
 */
enum PortoolStatus portool_eval(const struct PortoolConfig *cfg,
                                const char *params_path,
                                struct PortoolMetrics *out_metrics);

/**
 * Rolls out one trajectory tree and writes tree/reward/advantage JSONL
 * artifacts into `out_dir`. `template_id` NULL picks the default template;
 * `params_path` NULL uses the configured initial policy.
 *
 * # Safety
 * `cfg` must be a live handle; `template_id` and `params_path` NULL or
 * NUL-terminated; `out_dir` NUL-terminated.
 */
enum PortoolStatus portool_dump_tree(const struct PortoolConfig *cfg,
                                     const char *template_id,
                                     const char *params_path,
                                     const char *out_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PORTOOL_H */

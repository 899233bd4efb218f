#ifndef SELFPLAY_H
#define SELFPLAY_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum SpStatus {
  SP_STATUS_OK = 0,
  SP_STATUS_NULL_ARGUMENT = 1,
  SP_STATUS_INVALID_UTF8 = 2,
  SP_STATUS_CONFIG = 3,
  SP_STATUS_IO = 4,
  SP_STATUS_PARSE = 5,
  SP_STATUS_EVAL = 6,
  SP_STATUS_RUNTIME = 7,
  SP_STATUS_PANIC = 8,
} SpStatus;

/**
 * Opaque run configuration.
 */
typedef struct SpConfig SpConfig;

/**
 * Opaque result of a finished self-play run.
 */
typedef struct SpRun SpRun;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the last failed call on this thread, or null.
 * The pointer stays valid until the next call into the library.
 */
const char *sp_last_error(void);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed already.
 */
void sp_string_free(char *s);

/**
 * Default configuration with the given seed.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum SpStatus sp_config_default(uint64_t seed, struct SpConfig **out);

/**
 * Parses a TOML configuration; missing keys take their defaults.
 *
 * # Safety
 * `toml` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SpStatus sp_config_from_toml(const char *toml, struct SpConfig **out);

/**
 * Serializes the configuration as TOML into a caller-owned string.
 *
 * # Safety
 * `cfg` must be a live handle and `out` a valid pointer.
 */
enum SpStatus sp_config_to_toml(const struct SpConfig *cfg, char **out);

/**
 * # Safety
 * `cfg` must be a live handle.
 */
enum SpStatus sp_config_set_seed(struct SpConfig *cfg, uint64_t seed);

/**
 * # Safety
 * `cfg` must be a live handle.
 */
enum SpStatus sp_config_set_iterations(struct SpConfig *cfg, uint32_t iterations);

/**
 * Releases a configuration. Null is ignored.
 *
 * # Safety
 * `cfg` must come from this library and not have been freed already.
 */
void sp_config_free(struct SpConfig *cfg);

/**
 * Runs the full self-play loop, writing artifacts under `out_dir`.
 *
 * # Safety
 * `cfg` must be a live handle, `out_dir` a NUL-terminated string and `out`
 * a valid pointer.
 */
enum SpStatus sp_selfplay_run(const struct SpConfig *cfg, const char *out_dir, struct SpRun **out);

/**
 * Held-out Pass@1 of the random, fine-tuned and final policies.
 *
 * # Safety
 * `run` must be a live handle; each output pointer may be null to skip it.
 */
enum SpStatus sp_run_pass_at_1(const struct SpRun *run,
                               double *baseline,
                               double *sft,
                               double *last);

/**
 * Number of completed self-play iterations, excluding the SFT stage.
 *
 * # Safety
 * `run` must be a live handle and `out` a valid pointer.
 */
enum SpStatus sp_run_iterations(const struct SpRun *run, uint32_t *out);

/**
 * The run report as JSON in a caller-owned string.
 *
 * # Safety
 * `run` must be a live handle and `out` a valid pointer.
 */
enum SpStatus sp_run_report_json(const struct SpRun *run, char **out);

/**
 * Releases a run. Null is ignored.
 *
 * # Safety
 * `run` must come from this library and not have been freed already.
 */
void sp_run_free(struct SpRun *run);

/**
 * Held-out Pass@1 of a saved policy checkpoint under `cfg`'s corpus.
 *
 * # Safety
 * `cfg` must be a live handle, `policy_path` a NUL-terminated string and
 * `out` a valid pointer.
 */
enum SpStatus sp_eval_policy(const struct SpConfig *cfg, const char *policy_path, double *out);

/**
 * Parses and evaluates a program on one input with the given fuel.
 * Results outside the `i64` range are reported as evaluation errors.
 *
 * # Safety
 * `program` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SpStatus sp_program_eval(const char *program,
                              int64_t x0,
                              int64_t x1,
                              int64_t x2,
                              uint64_t fuel,
                              int64_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SELFPLAY_H */

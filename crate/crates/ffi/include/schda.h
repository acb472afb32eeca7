#ifndef SCHDA_H
#define SCHDA_H

/* Generated by cbindgen from schda-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every API call.
 */
typedef enum SchdaStatus {
  SCHDA_STATUS_OK = 0,
  SCHDA_STATUS_NULL_POINTER = 1,
  SCHDA_STATUS_INVALID_STRING = 2,
  SCHDA_STATUS_INVALID_CONFIG = 3,
  SCHDA_STATUS_RUN_FAILED = 4,
} SchdaStatus;

/**
 * Filter algorithm selector.
 */
typedef enum SchdaMode {
  SCHDA_MODE_BOOTSTRAP = 0,
  SCHDA_MODE_TEMPERED = 1,
  SCHDA_MODE_NUDGED = 2,
} SchdaMode;

/**
 * Opaque run-configuration handle.
 */
typedef struct SchdaConfig SchdaConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *schda_last_error(void);

/**
 * Library version as a static string.
 */
const char *schda_version(void);

/**
 * New handle with the full-domain experiment defaults. Free with
 * [`schda_config_free`].
 */
struct SchdaConfig *schda_config_default(void);

/**
 * New handle with the half-domain experiment defaults.
 */
struct SchdaConfig *schda_config_experiment2(void);

/**
 * Load a TOML config file; returns null on failure (see
 * [`schda_last_error`]).
 *
 * # Safety
 * `path` must be a valid NUL-terminated string.
 */
struct SchdaConfig *schda_config_from_file(const char *path);

/**
 * # Safety
 * `config` must be a live handle from this library or null.
 */
void schda_config_free(struct SchdaConfig *config);

/**
 * # Safety
 * `config` must be a live handle from this library.
 */
enum SchdaStatus schda_config_set_seed(struct SchdaConfig *config, uint64_t seed);

/**
 * # Safety
 * `config` must be a live handle from this library.
 */
enum SchdaStatus schda_config_set_mode(struct SchdaConfig *config, enum SchdaMode mode);

/**
 * # Safety
 * `config` must be a live handle from this library.
 */
enum SchdaStatus schda_config_set_assim_steps(struct SchdaConfig *config, uintptr_t steps);

/**
 * # Safety
 * `config` must be a live handle from this library.
 */
enum SchdaStatus schda_config_set_particles(struct SchdaConfig *config,
                                            uintptr_t n_particles,
                                            uintptr_t ess_threshold);

/**
 * # Safety
 * `config` must be a live handle from this library.
 */
enum SchdaStatus schda_config_set_batches(struct SchdaConfig *config, uintptr_t n_batches);

/**
 * Validate the handle's current values.
 *
 * # Safety
 * `config` must be a live handle from this library.
 */
enum SchdaStatus schda_config_validate(struct SchdaConfig *config);

/**
 * Run a full experiment, writing every artifact into `out_dir`.
 *
 * # Safety
 * `config` must be a live handle; `out_dir` a valid NUL-terminated string.
 */
enum SchdaStatus schda_run_experiment(const struct SchdaConfig *config, const char *out_dir);

/**
 * Regenerate the SVG plots from a run directory.
 *
 * # Safety
 * `dir` must be a valid NUL-terminated string.
 */
enum SchdaStatus schda_render_plots(const char *dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SCHDA_H */

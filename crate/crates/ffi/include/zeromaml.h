#ifndef ZEROMAML_H
#define ZEROMAML_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum ZmStatus {
  ZM_STATUS_OK = 0,
  ZM_STATUS_NULL_POINTER = 1,
  ZM_STATUS_INVALID_UTF8 = 2,
  ZM_STATUS_CONTRACT = 3,
  ZM_STATUS_DEGENERATE = 4,
  ZM_STATUS_UNSUPPORTED = 5,
  ZM_STATUS_NON_FINITE = 6,
  ZM_STATUS_CONFIG = 7,
  ZM_STATUS_FORMAT = 8,
  ZM_STATUS_IO = 9,
  ZM_STATUS_VERIFICATION_FAILED = 10,
  ZM_STATUS_PANIC = 11,
} ZmStatus;

/**
 * An experiment configuration.
 */
typedef struct ZmConfig ZmConfig;

/**
 * A model together with the banks, evaluation episodes and task stream it
 * trains on.
 */
typedef struct ZmSession ZmSession;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * The message of the last failed call on this thread, or null after a
 * successful one. Valid until the next call on this thread.
 */
const char *zm_last_error_message(void);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed already.
 */
void zm_string_free(char *s);

/**
 * Creates a configuration from a named preset.
 *
 * # Safety
 * `name` must be a NUL-terminated string; `out` must be writable.
 */
enum ZmStatus zm_config_from_preset(const char *name, struct ZmConfig **out);

/**
 * Parses a configuration from its text form.
 *
 * # Safety
 * `text` must be a NUL-terminated string; `out` must be writable.
 */
enum ZmStatus zm_config_parse(const char *text, struct ZmConfig **out);

/**
 * Sets the run seed.
 *
 * # Safety
 * `config` must be a live handle.
 */
enum ZmStatus zm_config_set_seed(struct ZmConfig *config, uint64_t seed);

/**
 * Writes the resolved configuration text; release it with [`zm_string_free`].
 *
 * # Safety
 * `config` must be a live handle; `out` must be writable.
 */
enum ZmStatus zm_config_to_text(const struct ZmConfig *config, char **out);

/**
 * Releases a configuration. Null is ignored.
 *
 * # Safety
 * `config` must come from this library and not have been freed already.
 */
void zm_config_free(struct ZmConfig *config);

/**
 * Runs the finite-difference gradient checks for `trials` random instances
 * per variant (0 keeps the configured count). Writes the reports as JSON
 * when `out_json` is non-null. Returns `ZM_STATUS_VERIFICATION_FAILED` if
 * any check breached its tolerance.
 *
 * # Safety
 * `config` must be a live handle; `out_json` must be null or writable.
 */
enum ZmStatus zm_verify(const struct ZmConfig *config, uint32_t trials, char **out_json);

/**
 * Builds the banks and evaluation episodes for `config` and initializes a
 * model from its seed.
 *
 * # Safety
 * `config` must be a live handle; `out` must be writable.
 */
enum ZmStatus zm_session_new(const struct ZmConfig *config, struct ZmSession **out);

/**
 * Runs `iterations` outer updates and writes the mean pre-update query loss
 * to `out_loss` (if non-null). A non-finite update leaves the model at its
 * last finite state.
 *
 * # Safety
 * `session` must be a live handle; `out_loss` must be null or writable.
 */
enum ZmStatus zm_session_train(struct ZmSession *session, uint32_t iterations, double *out_loss);

/**
 * Number of outer updates applied so far.
 *
 * # Safety
 * `session` must be a live handle; `out` must be writable.
 */
enum ZmStatus zm_session_iteration(const struct ZmSession *session, uint64_t *out);

/**
 * Meta-test accuracy on the frozen evaluation episodes, with the head as
 * trained (`zero_head_first == 0`) or zeroed before adaptation.
 *
 * # Safety
 * `session` must be a live handle; `out_accuracy` must be writable.
 */
enum ZmStatus zm_session_evaluate(const struct ZmSession *session,
                                  bool zero_head_first,
                                  double *out_accuracy);

/**
 * Frobenius norm of the head.
 *
 * # Safety
 * `session` must be a live handle; `out` must be writable.
 */
enum ZmStatus zm_session_head_norm(const struct ZmSession *session, double *out);

/**
 * Writes the model in its versioned text format.
 *
 * # Safety
 * `session` must be a live handle; `path` a NUL-terminated string.
 */
enum ZmStatus zm_session_save(const struct ZmSession *session, const char *path);

/**
 * Replaces the model with one loaded from `path`; its shape must match the
 * session's configuration. The iteration counter is reset.
 *
 * # Safety
 * `session` must be a live handle; `path` a NUL-terminated string.
 */
enum ZmStatus zm_session_load(struct ZmSession *session, const char *path);

/**
 * Releases a session. Null is ignored.
 *
 * # Safety
 * `session` must come from this library and not have been freed already.
 */
void zm_session_free(struct ZmSession *session);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ZEROMAML_H */

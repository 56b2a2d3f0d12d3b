#ifndef AMESH_H
#define AMESH_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. Zero is success.
 */
typedef enum AmeshStatus {
  AMESH_STATUS_OK = 0,
  AMESH_STATUS_NULL_POINTER = 1,
  AMESH_STATUS_INVALID_ARGUMENT = 2,
  AMESH_STATUS_UNKNOWN_KIND = 3,
  AMESH_STATUS_UNKNOWN_SERVICE = 4,
  AMESH_STATUS_TRUNCATED = 5,
  AMESH_STATUS_BAD_FRAME = 6,
  AMESH_STATUS_OVERSIZE = 7,
  AMESH_STATUS_EMPTY_INPUT = 8,
  AMESH_STATUS_NON_POSITIVE_VALUE = 9,
  AMESH_STATUS_NON_POSITIVE_BASELINE = 10,
  AMESH_STATUS_IO = 11,
  AMESH_STATUS_PANIC = 12,
} AmeshStatus;

/**
 * A decoded or constructed message envelope.
 */
typedef struct AmeshEnvelope AmeshEnvelope;

/**
 * An in-process demo server with its own runtime.
 */
typedef struct AmeshServer AmeshServer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty if none. Valid
 * until the next failing call on the same thread.
 */
const char *amesh_last_error(void);

/**
 * Library version, NUL-terminated, static.
 */
const char *amesh_version(void);

/**
 * Builds an envelope. `session_id` is UTF-8 of `session_len` bytes,
 * `payload` is `payload_len` bytes; either may be null when empty.
 *
 * # Safety
 * Pointers must be valid for the given lengths; `out` must be writable.
 */
enum AmeshStatus amesh_envelope_new(uint8_t kind,
                                    uint8_t service,
                                    const uint8_t *session_id,
                                    size_t session_len,
                                    uint64_t request_id,
                                    uint64_t timestamp_us,
                                    const uint8_t *payload,
                                    size_t payload_len,
                                    struct AmeshEnvelope **out);

/**
 * # Safety
 * `env` must come from this library and not be used afterwards. Null is ignored.
 */
void amesh_envelope_free(struct AmeshEnvelope *env);

/**
 * # Safety
 * `env` must be a live envelope handle.
 */
uint8_t amesh_envelope_kind(const struct AmeshEnvelope *env);

/**
 * # Safety
 * `env` must be a live envelope handle.
 */
uint8_t amesh_envelope_service(const struct AmeshEnvelope *env);

/**
 * # Safety
 * `env` must be a live envelope handle.
 */
uint64_t amesh_envelope_request_id(const struct AmeshEnvelope *env);

/**
 * # Safety
 * `env` must be a live envelope handle.
 */
uint64_t amesh_envelope_timestamp_us(const struct AmeshEnvelope *env);

/**
 * Session id bytes (UTF-8, not NUL-terminated), owned by the handle.
 *
 * # Safety
 * `env` must be a live envelope handle; `len` must be writable.
 */
const uint8_t *amesh_envelope_session_id(const struct AmeshEnvelope *env, size_t *len);

/**
 * Payload bytes, owned by the handle.
 *
 * # Safety
 * `env` must be a live envelope handle; `len` must be writable.
 */
const uint8_t *amesh_envelope_payload(const struct AmeshEnvelope *env, size_t *len);

/**
 * Encodes `env` into a new buffer, released with [`amesh_bytes_free`].
 *
 * # Safety
 * `env` must be a live handle; `out` and `out_len` must be writable.
 */
enum AmeshStatus amesh_encode(const struct AmeshEnvelope *env, uint8_t **out, size_t *out_len);

/**
 * # Safety
 * `data`/`len` must come from [`amesh_encode`]. Null is ignored.
 */
void amesh_bytes_free(uint8_t *data, size_t len);

/**
 * Decodes the first frame of `data`. On success `*out` holds a new handle
 * and `*consumed` the frame length.
 *
 * # Safety
 * `data` must be valid for `len` bytes; `out` and `consumed` must be writable.
 */
enum AmeshStatus amesh_decode(const uint8_t *data,
                              size_t len,
                              struct AmeshEnvelope **out,
                              size_t *consumed);

/**
 * # Safety
 * `values` must be valid for `len` doubles; `out` must be writable.
 */
enum AmeshStatus amesh_harmonic_mean(const double *values, size_t len, double *out);

/**
 * `(baseline - candidate) / baseline`.
 *
 * # Safety
 * `out` must be writable.
 */
enum AmeshStatus amesh_performance_rate(double baseline_ms, double candidate_ms, double *out);

/**
 * Starts the conversational pipeline demo on `127.0.0.1:port` (0 picks a
 * free port). `remote` serves the mock components from broker workers.
 *
 * # Safety
 * `out` must be writable.
 */
enum AmeshStatus amesh_server_start(uint16_t port, bool remote, struct AmeshServer **out);

/**
 * `tcp://host:port`, owned by the handle.
 *
 * # Safety
 * `server` must be a live server handle.
 */
const char *amesh_server_endpoint(const struct AmeshServer *server);

/**
 * Stops the server and releases the handle. Null is ignored.
 *
 * # Safety
 * `server` must come from [`amesh_server_start`] and not be used afterwards.
 */
void amesh_server_stop(struct AmeshServer *server);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AMESH_H */

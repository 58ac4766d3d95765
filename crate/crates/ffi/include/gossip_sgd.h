#ifndef GOSSIP_SGD_H
#define GOSSIP_SGD_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

// Result of every fallible call.
typedef enum GsStatus {
  GS_STATUS_OK = 0,
  GS_STATUS_NULL_POINTER = 1,
  GS_STATUS_INVALID_ARGUMENT = 2,
  GS_STATUS_CONFIG_ERROR = 3,
  GS_STATUS_RUNTIME_ERROR = 4,
  GS_STATUS_DECODE_ERROR = 5,
  GS_STATUS_BUFFER_TOO_SMALL = 6,
  GS_STATUS_OUT_OF_RANGE = 7,
  GS_STATUS_PANIC = 8,
} GsStatus;

typedef enum GsLambdaVariant {
  GS_LAMBDA_VARIANT_THEOREM = 0,
  GS_LAMBDA_VARIANT_DIAGONALIZATION = 1,
} GsLambdaVariant;

// A validated experiment configuration.
typedef struct GsConfig GsConfig;

// A finished experiment: traces, summary and optional bound verdict.
typedef struct GsRun GsRun;

// One logged observation; the run id and protocol live on the run handle.
typedef struct GsTraceRecord {
  uint64_t t;
  double sim_time;
  double sq_err_opt;
  double sq_err_consensus;
  double loss_mean;
  double alpha;
  double max_grad_norm;
} GsTraceRecord;

// Closed-form bound inputs. `beta`, `c` and `lambda_variant` are read only
// by the consensus bound.
typedef struct GsBoundParams {
  double m;
  double l;
  double sigma_sq;
  double alpha;
  double beta;
  size_t p;
  double initial_sq_err;
  double c;
  enum GsLambdaVariant lambda_variant;
} GsBoundParams;

// Decoded frame header.
typedef struct GsFrameHeader {
  uint8_t kind;
  uint32_t sender;
  uint32_t round_tag;
  uint32_t count;
} GsFrameHeader;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the most recent failure on this thread, or NULL after a
// success. The pointer stays valid until the next call on this thread.
const char *gs_last_error_message(void);

// Releases a string returned by this library.
//
// # Safety
// `s` must be NULL or a pointer obtained from this library not yet freed.
void gs_string_free(char *s);

// Parses and validates a TOML experiment config.
//
// # Safety
// `text` must be a NUL-terminated string; `out` must be writable.
enum GsStatus gs_config_parse(const char *text, struct GsConfig **out);

// # Safety
// `cfg` must be NULL or a handle from [`gs_config_parse`] not yet freed.
void gs_config_free(struct GsConfig *cfg);

// Complete TOML echo of a config; free with [`gs_string_free`].
//
// # Safety
// `cfg` must be a live handle; `out` must be writable.
enum GsStatus gs_config_to_toml(const struct GsConfig *cfg, char **out);

// Redirects a config's artifacts.
//
// # Safety
// `cfg` must be a live handle; `dir` a NUL-terminated string.
enum GsStatus gs_config_set_output_dir(struct GsConfig *cfg, const char *dir);

// Runs the experiment and writes its artifacts.
//
// A run whose bound report fails still returns `GS_STATUS_OK`; read the
// verdict with [`gs_run_exit_code`] or [`gs_run_bound_pass`].
//
// # Safety
// `cfg` must be a live handle; `out` must be writable.
enum GsStatus gs_run_experiment(const struct GsConfig *cfg, struct GsRun **out);

// # Safety
// `run` must be NULL or a handle from [`gs_run_experiment`] not yet freed.
void gs_run_free(struct GsRun *run);

// The command-line exit code the run maps to (0 or 1).
//
// # Safety
// `run` must be a live handle.
int32_t gs_run_exit_code(const struct GsRun *run);

// `1` pass, `0` fail, `-1` when no bound report was requested.
//
// # Safety
// `run` must be a live handle.
int32_t gs_run_bound_pass(const struct GsRun *run);

// # Safety
// `run` must be a live handle.
size_t gs_run_trial_count(const struct GsRun *run);

// Number of records in trial `trial`'s trace.
//
// # Safety
// `run` must be a live handle; `out` must be writable.
enum GsStatus gs_run_trace_len(const struct GsRun *run, size_t trial, size_t *out);

// Copies record `index` of trial `trial`.
//
// # Safety
// `run` must be a live handle; `out` must be writable.
enum GsStatus gs_run_trace_record(const struct GsRun *run,
                                  size_t trial,
                                  size_t index,
                                  struct GsTraceRecord *out);

// Summary JSON of the run; free with [`gs_string_free`].
//
// # Safety
// `run` must be a live handle; `out` must be writable.
enum GsStatus gs_run_summary_json(const struct GsRun *run, char **out);

// `(1 - 2 alpha mL/(m+L))^t init + p alpha sigma^2 (m+L)/(2mL)`.
//
// # Safety
// `params` must be readable and `out` writable.
enum GsStatus gs_sync_optimality_bound(const struct GsBoundParams *params, uint64_t t, double *out);

// Like the synchronous bound with the contraction slowed by `1/p`.
//
// # Safety
// `params` must be readable and `out` writable.
enum GsStatus gs_async_optimality_bound(const struct GsBoundParams *params,
                                        uint64_t t,
                                        double *out);

// Asynchronous consensus bound; needs `beta`, `c` and `lambda_variant`.
//
// # Safety
// `params` must be readable and `out` writable.
enum GsStatus gs_async_consensus_bound(const struct GsBoundParams *params, uint64_t t, double *out);

// Per-event consensus contraction factor.
//
// # Safety
// `out` must be writable.
enum GsStatus gs_contraction_lambda(size_t p,
                                    double beta,
                                    enum GsLambdaVariant variant,
                                    double *out);

// Text report of closed-form versus enumerated mixing moments; free with
// [`gs_string_free`].
//
// # Safety
// `out` must be writable.
enum GsStatus gs_mixing_diagnostics(size_t p, double beta, char **out);

// Bytes needed to encode a frame of `count` doubles.
size_t gs_frame_encoded_len(size_t count);

// Encodes a frame into `buf`. `written` always receives the required size,
// so a too-small buffer reports how much to allocate.
//
// # Safety
// `payload` must point to `count` doubles (or be NULL when `count` is 0);
// `buf` must be writable for `cap` bytes; `written` must be writable.
enum GsStatus gs_frame_encode(uint8_t kind,
                              uint32_t sender,
                              uint32_t round_tag,
                              const double *payload,
                              size_t count,
                              uint8_t *buf,
                              size_t cap,
                              size_t *written);

// Decodes a frame. The header is always filled on success or when the
// payload buffer is too small; `payload` receives `header.count` doubles.
//
// # Safety
// `buf` must be readable for `len` bytes; `header` writable; `payload`
// writable for `cap` doubles (may be NULL when `cap` is 0).
enum GsStatus gs_frame_decode(const uint8_t *buf,
                              size_t len,
                              struct GsFrameHeader *header,
                              double *payload,
                              size_t cap);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GOSSIP_SGD_H */

#ifndef MAXCLUST_H
#define MAXCLUST_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum MaxclustStatus {
  MAXCLUST_STATUS_OK = 0,
  MAXCLUST_STATUS_NULL_POINTER = 1,
  MAXCLUST_STATUS_INVALID_UTF8 = 2,
  // A parameter is out of range.
  MAXCLUST_STATUS_INVALID_ARGUMENT = 3,
  // The configuration was rejected; the message names the key.
  MAXCLUST_STATUS_CONFIG = 4,
  // The computation failed (degenerate data, budget, censoring).
  MAXCLUST_STATUS_RUNTIME = 5,
  MAXCLUST_STATUS_IO = 6,
  // Output buffer too small; `*len` holds the required length.
  MAXCLUST_STATUS_BUFFER_TOO_SMALL = 7,
  // A bug in the library; the handle arguments are left untouched.
  MAXCLUST_STATUS_PANIC = 8,
} MaxclustStatus;

// Experiment kinds, mirroring the CLI subcommands.
typedef enum MaxclustKind {
  MAXCLUST_KIND_SAMPLE = 0,
  MAXCLUST_KIND_EXTREMES = 1,
  MAXCLUST_KIND_TAILS = 2,
  MAXCLUST_KIND_HITTING = 3,
  MAXCLUST_KIND_BC_COMPARE = 4,
  MAXCLUST_KIND_ORACLE = 5,
  MAXCLUST_KIND_SWEEP = 6,
} MaxclustKind;

// Witness rule of a hitting time.
typedef enum MaxclustRule {
  MAXCLUST_RULE_BOX = 0,
  MAXCLUST_RULE_INTERIOR = 1,
  MAXCLUST_RULE_AMBIENT = 2,
} MaxclustRule;

// Experiment configuration.
typedef struct MaxclustConfig MaxclustConfig;

// A zero-boundary site configuration on `B_n`.
typedef struct MaxclustField MaxclustField;

// A finished run: output directory and summary row.
typedef struct MaxclustRun MaxclustRun;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or NULL. Valid until the
// next failing call on the same thread.
const char *maxclust_last_error(void);

// Library version, static.
const char *maxclust_version(void);

// Default configuration of `kind`.
//
// # Safety
// `out` must be valid for writes.
enum MaxclustStatus maxclust_config_new(enum MaxclustKind kind, struct MaxclustConfig **out);

// Parses a TOML configuration. The document must set `kind`.
//
// # Safety
// `toml` must be a NUL-terminated string and `out` valid for writes.
enum MaxclustStatus maxclust_config_from_toml(const char *toml, struct MaxclustConfig **out);

// Serializes the configuration as TOML.
//
// # Safety
// `cfg` must be a live handle; `buf` holds `cap` bytes; `len` is writable.
enum MaxclustStatus maxclust_config_to_toml(const struct MaxclustConfig *cfg,
                                            char *buf,
                                            size_t cap,
                                            size_t *len);

// Hex SHA-256 digest of the configuration (64 characters).
//
// # Safety
// As for [`maxclust_config_to_toml`].
enum MaxclustStatus maxclust_config_digest(const struct MaxclustConfig *cfg,
                                           char *buf,
                                           size_t cap,
                                           size_t *len);

// Sets the master seed.
//
// # Safety
// `cfg` must be a live handle.
enum MaxclustStatus maxclust_config_set_seed(struct MaxclustConfig *cfg, uint64_t seed);

// Releases a configuration. NULL is ignored.
//
// # Safety
// `cfg` must be NULL or a handle not yet freed.
void maxclust_config_free(struct MaxclustConfig *cfg);

// Runs an experiment, writing its files into `out_dir`.
//
// # Safety
// `cfg` must be a live handle, `out_dir` a NUL-terminated path and `out`
// valid for writes.
enum MaxclustStatus maxclust_run(const struct MaxclustConfig *cfg,
                                 const char *out_dir,
                                 struct MaxclustRun **out);

// Summary value `key` of a run, as text.
//
// # Safety
// `run` must be a live handle, `key` NUL-terminated; see the module notes
// for `buf`, `cap` and `len`.
enum MaxclustStatus maxclust_run_summary_get(const struct MaxclustRun *run,
                                             const char *key,
                                             char *buf,
                                             size_t cap,
                                             size_t *len);

// The summary row as two-line CSV.
//
// # Safety
// As for [`maxclust_run_summary_get`].
enum MaxclustStatus maxclust_run_summary_csv(const struct MaxclustRun *run,
                                             char *buf,
                                             size_t cap,
                                             size_t *len);

// Releases a run handle (the files stay). NULL is ignored.
//
// # Safety
// `run` must be NULL or a handle not yet freed.
void maxclust_run_free(struct MaxclustRun *run);

// Samples replica `replica` of Bernoulli(`p`) on `B_radius` in `dim`
// dimensions, identical to the field the harness uses for that replica.
//
// # Safety
// `out` must be valid for writes.
enum MaxclustStatus maxclust_field_sample(size_t dim,
                                          size_t radius,
                                          double p,
                                          uint64_t master_seed,
                                          uint64_t replica,
                                          struct MaxclustField **out);

// Number of sites of the field's box.
//
// # Safety
// `field` must be a live handle.
enum MaxclustStatus maxclust_field_site_count(const struct MaxclustField *field, size_t *out);

// Copies the occupation pattern (row-major lexicographic order, 1 =
// occupied) into `buf`, which must hold the site count.
//
// # Safety
// `field` must be a live handle and `buf` hold `cap` bytes.
enum MaxclustStatus maxclust_field_occupied(const struct MaxclustField *field,
                                            uint8_t *buf,
                                            size_t cap);

// Size of the largest cluster (zero boundary).
//
// # Safety
// `field` must be a live handle and `out` valid for writes.
enum MaxclustStatus maxclust_field_max_cluster(const struct MaxclustField *field, uint64_t *out);

// Releases a field. NULL is ignored.
//
// # Safety
// `field` must be NULL or a handle not yet freed.
void maxclust_field_free(struct MaxclustField *field);

// Exact `P(longest run of successes <= m)` among `len` Bernoulli(`p`)
// trials.
//
// # Safety
// `out` must be valid for writes.
enum MaxclustStatus maxclust_longest_run_cdf(uint64_t len, double p, uint64_t m, double *out);

// Hitting time of the event "a cluster of at least `m` sites" for replica
// `replica` of the lazy Bernoulli field. `*tau` is the volume of the first
// box with a witness, or of `B_{k_max}` with `*censored = 1`.
//
// # Safety
// `tau` and `censored` must be valid for writes.
enum MaxclustStatus maxclust_hitting_time(size_t dim,
                                          double p,
                                          uint64_t m,
                                          enum MaxclustRule rule,
                                          uint64_t k_max,
                                          uint64_t master_seed,
                                          uint64_t replica,
                                          uint64_t *tau,
                                          uint8_t *censored);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MAXCLUST_H */

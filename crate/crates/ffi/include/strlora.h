#ifndef STRLORA_H
#define STRLORA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SlStatus {
  SL_STATUS_OK = 0,
  SL_STATUS_NULL_POINTER = 1,
  SL_STATUS_INVALID_ARGUMENT = 2,
  SL_STATUS_IO = 3,
  SL_STATUS_PARSE = 4,
  SL_STATUS_DEGENERATE = 5,
  SL_STATUS_NON_FINITE = 6,
  SL_STATUS_INTERNAL = 7,
} SlStatus;

// Run configuration.
typedef struct SlConfig SlConfig;

// Per-chunk accuracy matrix with forgetting metrics.
typedef struct SlLedger SlLedger;

// Result of one training run over the stream.
typedef struct SlRun SlRun;

// Metrics of one dataset at one chunk. `seen` is false before the dataset
// first appears, and the other fields are then zero.
typedef struct SlTaskMetrics {
  bool seen;
  double a;
  double f;
  double ap;
  double af;
} SlTaskMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or NULL. Valid until the
// next call into this library on the same thread.
const char *sl_last_error(void);

// Library version as a static NUL-terminated string.
const char *sl_version(void);

// Relative drop of `current` below the best of `history[0..n]`, clamped at 0.
//
// # Safety
// `history` must be valid for `n` reads; `out` must be writable.
enum SlStatus sl_forgetting(const double *history, size_t n, double current, double *out);

// Linear CKA between row-major `x` (`n×p`) and `y` (`n×q`).
//
// # Safety
// `x` and `y` must be valid for `n·p` and `n·q` reads; `out` must be writable.
enum SlStatus sl_cka(const double *x, const double *y, size_t n, size_t p, size_t q, double *out);

// Softmax over the entries with non-zero `mask`, exactly zero elsewhere.
//
// # Safety
// `logits`, `mask` and `out` must be valid for `n` elements.
enum SlStatus sl_masked_softmax(const double *logits, const uint8_t *mask, size_t n, double *out);

// Indices of the `k` largest of `p[0..n]`, largest first, ties to the lower index.
//
// # Safety
// `p` must be valid for `n` reads and `out` for `k` writes.
enum SlStatus sl_top_k(const double *p, size_t n, size_t k, size_t *out);

// # Safety
// `out` must be writable.
enum SlStatus sl_ledger_new(size_t n_tasks, struct SlLedger **out);

// # Safety
// `ledger` must be NULL or a handle from this library, freed at most once.
void sl_ledger_free(struct SlLedger *ledger);

// Appends one chunk's accuracies. `seen[m] == 0` marks a dataset not yet
// evaluated; a NULL `seen` marks every dataset as evaluated.
//
// # Safety
// `acc` (and `seen` unless NULL) must be valid for `n` reads.
enum SlStatus sl_ledger_push(struct SlLedger *ledger,
                             const double *acc,
                             const uint8_t *seen,
                             size_t n);

// Number of chunks recorded.
//
// # Safety
// `ledger` must be a live handle; `out` must be writable.
enum SlStatus sl_ledger_len(const struct SlLedger *ledger, size_t *out);

// `(MAP, MAF)` after chunk `t` (1-based).
//
// # Safety
// `ledger` must be a live handle; `map` and `maf` must be writable.
enum SlStatus sl_ledger_summary(const struct SlLedger *ledger, size_t t, double *map, double *maf);

// Metrics of dataset `m` (0-based) after chunk `t` (1-based).
//
// # Safety
// `ledger` must be a live handle; `out` must be writable.
enum SlStatus sl_ledger_task(const struct SlLedger *ledger,
                             size_t t,
                             size_t m,
                             struct SlTaskMetrics *out);

// Writes the per-dataset CSV to `task_csv` and, unless NULL, the
// per-chunk summary to `summary_csv`.
//
// # Safety
// `ledger` must be a live handle; paths must be NUL-terminated or NULL where allowed.
enum SlStatus sl_ledger_write_csv(const struct SlLedger *ledger,
                                  const char *task_csv,
                                  const char *summary_csv);

// # Safety
// `out` must be writable.
enum SlStatus sl_config_default(struct SlConfig **out);

// Parses `key = value` lines; missing keys keep their defaults.
//
// # Safety
// `text` must be NUL-terminated; `out` must be writable.
enum SlStatus sl_config_parse(const char *text, struct SlConfig **out);

// Sets one key, e.g. `("variant", "uniform_moe")` or `("seed", "3")`.
//
// # Safety
// `cfg` must be a live handle; `key` and `value` must be NUL-terminated.
enum SlStatus sl_config_set(struct SlConfig *cfg, const char *key, const char *value);

// Serializes the configuration into `buf` (NUL-terminated). `needed`
// receives the buffer size required, including the terminator; a `cap`
// that is too small writes nothing and returns `SL_STATUS_INVALID_ARGUMENT`.
//
// # Safety
// `cfg` must be a live handle; `buf` must be valid for `cap` writes or NULL
// when `cap` is 0; `needed` must be writable.
enum SlStatus sl_config_to_text(const struct SlConfig *cfg, char *buf, size_t cap, size_t *needed);

// # Safety
// `cfg` must be NULL or a handle from this library, freed at most once.
void sl_config_free(struct SlConfig *cfg);

// Trains over the configured stream, evaluating after every chunk. Output
// files are written when the configuration sets `out`.
//
// # Safety
// `cfg` must be a live handle; `out` must be writable.
enum SlStatus sl_train(const struct SlConfig *cfg, struct SlRun **out);

// Final `(MAP, MAF)`.
//
// # Safety
// `run` must be a live handle; `map` and `maf` must be writable.
enum SlStatus sl_run_map_maf(const struct SlRun *run, double *map, double *maf);

// Mean off-diagonal routing CKA across tasks at the end of the run.
// Returns `SL_STATUS_DEGENERATE` when routing is constant and CKA undefined.
//
// # Safety
// `run` must be a live handle; `out` must be writable.
enum SlStatus sl_run_mean_cka(const struct SlRun *run, double *out);

// Copy of the run's metric ledger as a new handle.
//
// # Safety
// `run` must be a live handle; `out` must be writable.
enum SlStatus sl_run_ledger(const struct SlRun *run, struct SlLedger **out);

// # Safety
// `run` must be NULL or a handle from this library, freed at most once.
void sl_run_free(struct SlRun *run);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STRLORA_H */

#ifndef ANONCOUNT_H
#define ANONCOUNT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  ANC_MODE_BASIC = 0,
  ANC_MODE_SIMULTANEOUS = 1,
  ANC_MODE_GENERALIZED = 2,
} AncMode;

// Status code returned by every fallible function.
typedef enum {
  ANC_STATUS_OK = 0,
  ANC_STATUS_NULL_POINTER = 1,
  ANC_STATUS_INVALID_ARGUMENT = 2,
  // The simulator rejected the configuration or the schedule.
  ANC_STATUS_ENGINE_ERROR = 3,
  // The run has no value of the requested kind.
  ANC_STATUS_NO_OUTPUT = 4,
  ANC_STATUS_INDEX_OUT_OF_RANGE = 5,
  ANC_STATUS_PANIC = 6,
} AncStatus;

// Opaque handle to a finished run.
typedef struct AncRun AncRun;

// Metrics of a finished run.
typedef struct {
  uint64_t rounds;
  uint64_t resets;
  uint64_t max_diam_estimate;
  uint64_t distinct_red_edges;
  uint64_t max_msg_bits;
  uint64_t max_param;
  // Level at which the leader first obtained a count, or -1.
  int64_t count_level;
  // Output matches the true network.
  bool correct;
  // Correct and no invariant violated.
  bool passed;
} AncMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Last error message on this thread, or NULL. The pointer stays valid
// until the next failing call on the same thread.
const char *anc_last_error(void);

// Worst-case round bound for a connected network of `n` processes.
uint64_t anc_round_bound(uint32_t n);

// Runs one experiment.
//
// `scheduler` is a NUL-terminated name such as `"random-connected"`,
// `"path"`, `"alternating:star+path"` or `"t-union:2"`. `inputs` holds one
// value per process in generalized mode and may be NULL otherwise. When
// `check` is set the invariant monitor runs alongside.
//
// # Safety
// `scheduler` must be a valid C string, `inputs` must point to
// `inputs_len` values (or be NULL with length 0) and `out` must be a valid
// pointer. The handle written to `out` must be released with
// [`anc_run_free`].
AncStatus anc_run(uint32_t n,
                  const char *scheduler,
                  uint64_t seed,
                  AncMode mode,
                  const uint64_t *inputs,
                  size_t inputs_len,
                  bool check,
                  AncRun **out);

// Releases a run handle. NULL is ignored.
//
// # Safety
// `run` must come from [`anc_run`] and must not be used afterwards.
void anc_run_free(AncRun *run);

// Count output by the leader (basic and simultaneous modes).
//
// # Safety
// `run` must be a live handle and `count` a valid pointer.
AncStatus anc_run_count(const AncRun *run, uint64_t *count);

// Number of distinct non-leader input values in a generalized output.
//
// # Safety
// `run` must be a live handle and `len` a valid pointer.
AncStatus anc_run_input_classes(const AncRun *run, size_t *len);

// Entry `index` of a generalized output: an input value and the number of
// processes holding it.
//
// # Safety
// `run` must be a live handle; `value` and `count` valid pointers.
AncStatus anc_run_input_at(const AncRun *run, size_t index, uint64_t *value, uint64_t *count);

// # Safety
// `run` must be a live handle and `out` a valid pointer.
AncStatus anc_run_metrics(const AncRun *run, AncMetrics *out);

// Number of invariant violations recorded by the monitor.
//
// # Safety
// `run` must be a live handle and `len` a valid pointer.
AncStatus anc_run_violation_count(const AncRun *run, size_t *len);

// Description of violation `index`, owned by the handle.
//
// # Safety
// `run` must be a live handle and `text` a valid pointer.
AncStatus anc_run_violation(const AncRun *run, size_t index, const char **text);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ANONCOUNT_H */

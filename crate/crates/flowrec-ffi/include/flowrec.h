/* C interface to the flowrec state-estimation library. */

#ifndef FLOWREC_H
#define FLOWREC_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status of every fallible call.
 */
typedef enum FlowrecStatus {
  FLOWREC_STATUS_OK = 0,
  /**
   * I/O failure (missing or unreadable store).
   */
  FLOWREC_STATUS_IO = 1,
  /**
   * Invalid arguments or configuration.
   */
  FLOWREC_STATUS_USAGE = 2,
  /**
   * Numerical failure (ill-conditioned or unstable problem).
   */
  FLOWREC_STATUS_NUMERICAL = 3,
  /**
   * A null pointer was passed where data was required.
   */
  FLOWREC_STATUS_NULL_ARGUMENT = 4,
  /**
   * Internal panic; the message holds details.
   */
  FLOWREC_STATUS_PANIC = 5,
} FlowrecStatus;

/**
 * Opaque handle over a loaded trained store plus its observation model.
 */
typedef struct FlowrecContext FlowrecContext;

/**
 * Opaque handle over one reconstruction result.
 */
typedef struct FlowrecResult FlowrecResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Last error message of this thread; the pointer stays valid until the
 * next failing call on the same thread.
 */
const char *flowrec_last_error_message(void);

/**
 * Opens a trained store directory. On success writes a context handle that
 * must be released with `flowrec_context_free`.
 */
enum FlowrecStatus flowrec_context_open(const char *trained_dir, struct FlowrecContext **out);

void flowrec_context_free(struct FlowrecContext *ctx);

/**
 * Number of voxel measurements the context expects.
 */
uintptr_t flowrec_measurement_count(const struct FlowrecContext *ctx);

/**
 * Reconstructs from a raw measurement vector at observed (t, hr).
 *
 * `mode` is one of "pbdw", "joint", "ls", "cls"; `n` overrides the reduced
 * dimension when nonzero. The result handle must be released with
 * `flowrec_result_free`.
 */
enum FlowrecStatus flowrec_reconstruct(const struct FlowrecContext *ctx,
                                       const double *measurements,
                                       uintptr_t len,
                                       double t,
                                       double hr,
                                       const char *mode,
                                       uintptr_t n,
                                       struct FlowrecResult **out);

void flowrec_result_free(struct FlowrecResult *result);

/**
 * Length of the reconstructed coefficient vector.
 */
uintptr_t flowrec_result_field_len(const struct FlowrecResult *result);

/**
 * Copies the reconstructed coefficients into a caller buffer of exactly
 * `len` doubles.
 */
enum FlowrecStatus flowrec_result_copy_field(const struct FlowrecResult *result,
                                             double *out,
                                             uintptr_t len);

/**
 * Diagnostics of a reconstruction as a JSON document; release the string
 * with `flowrec_string_free`.
 */
char *flowrec_result_diagnostics_json(const struct FlowrecResult *result);

void flowrec_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FLOWREC_H */

#ifndef OLIVE_H
#define OLIVE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define OLIVE_OK 0

#define OLIVE_ERR_NULL -1

#define OLIVE_ERR_INVALID -2

#define OLIVE_ERR_SHAPE -3

#define OLIVE_ERR_IO -4

#define OLIVE_ERR_STASH_OVERFLOW -5

#define OLIVE_ERR_BUFFER_TOO_SMALL -6

#define OLIVE_ERR_PANIC -99

#define OLIVE_ALGO_LINEAR 0

#define OLIVE_ALGO_BASELINE 1

#define OLIVE_ALGO_ADVANCED 2

#define OLIVE_ALGO_GROUPED 3

#define OLIVE_ALGO_ORAM 4

#define OLIVE_SENTINEL_INDEX UINT32_MAX

// A PathORAM instance with its own random stream.
typedef struct OliveOram OliveOram;

// A recorded memory-access trace.
typedef struct OliveTrace OliveTrace;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the last error message of this thread into `buf` (NUL
// terminated, truncated to `len`). Returns the full message length.
//
// # Safety
// `buf` must be null or valid for `len` writable bytes.
size_t olive_last_error_message(char *buf, size_t len);

// Library version as a static NUL-terminated string.
const char *olive_version(void);

struct OliveTrace *olive_trace_new(void);

// # Safety
// `trace` must be null or a handle from [`olive_trace_new`] not yet freed.
void olive_trace_free(struct OliveTrace *trace);

// Number of recorded events, or 0 for a null handle.
//
// # Safety
// `trace` must be null or a live handle.
size_t olive_trace_len(const struct OliveTrace *trace);

// Discards recorded events.
//
// # Safety
// `trace` must be null or a live handle.
int32_t olive_trace_clear(struct OliveTrace *trace);

// Writes `*out = 1` if the traces are equal at `granularity`, else 0.
//
// # Safety
// `a`, `b` must be live handles; `out` must be writable.
int32_t olive_trace_equal(const struct OliveTrace *a,
                          const struct OliveTrace *b,
                          uint64_t granularity,
                          int32_t *out);

// Saves the trace in the OLVT binary format.
//
// # Safety
// `trace` must be a live handle; `path` a NUL-terminated UTF-8 string.
int32_t olive_trace_save(const struct OliveTrace *trace, const char *path);

// Aggregates `n` clients of `k` cells into the dense `out[0..d]`.
//
// `param` is the cacheline size for baseline, the group size for grouped
// and the bucket size for ORAM (0 = default); it is ignored otherwise.
// When `trace` is non-null the aggregator's accesses are appended to it.
//
// # Safety
// `indices` and `values` must be valid for `n * k` reads, `out` for `d`
// writes; `trace` must be null or a live handle.
int32_t olive_aggregate(uint32_t algo,
                        size_t param,
                        const uint32_t *indices,
                        const float *values,
                        size_t n,
                        size_t k,
                        size_t d,
                        uint64_t seed,
                        float *out,
                        struct OliveTrace *trace);

// Top `ceil(alpha * d)` entries of `delta` by magnitude, in index order.
// Writes the count to `*out_k`; fails with `OLIVE_ERR_BUFFER_TOO_SMALL`
// (still setting `*out_k`) when `capacity` is smaller.
//
// # Safety
// `delta` must be valid for `d` reads, `out_indices`/`out_values` for
// `capacity` writes, `out_k` writable.
int32_t olive_topk_sparsify(const float *delta,
                            size_t d,
                            double alpha,
                            uint32_t *out_indices,
                            float *out_values,
                            size_t capacity,
                            size_t *out_k);

// New ORAM of `capacity` zero-valued blocks. `bucket_size`/`stash_size`
// of 0 select the defaults (4 and 20). Returns null on failure.
struct OliveOram *olive_oram_new(size_t capacity,
                                 size_t bucket_size,
                                 size_t stash_size,
                                 uint64_t seed);

// # Safety
// `oram` must be null or a handle from [`olive_oram_new`] not yet freed.
void olive_oram_free(struct OliveOram *oram);

// # Safety
// `oram` must be a live handle and `out` writable.
int32_t olive_oram_read(struct OliveOram *oram, uint32_t addr, float *out);

// Adds `delta` to block `addr`. A stash overflow is reported as
// `OLIVE_ERR_STASH_OVERFLOW`; the write is still applied.
//
// # Safety
// `oram` must be a live handle.
int32_t olive_oram_write_add(struct OliveOram *oram, uint32_t addr, float delta);

// Accesses that overflowed the stash so far, or 0 for a null handle.
//
// # Safety
// `oram` must be null or a live handle.
uint64_t olive_oram_overflow_count(const struct OliveOram *oram);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* OLIVE_H */

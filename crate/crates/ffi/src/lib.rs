//! C ABI over `olive-core`.
//!
//! Every fallible function returns an `int32_t` status: `OLIVE_OK` (0) or a
//! negative `OLIVE_ERR_*` code. The message for the most recent failure on
//! the calling thread is available through [`olive_last_error_message`].
//! Handles are opaque and must be released with their `_free` function.
//!
//! Gradient cells cross the boundary as parallel `indices`/`values` arrays
//! of length `n * k`; index `OLIVE_SENTINEL_INDEX` marks a dummy cell whose
//! value must be 0.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use olive::aggregation::{AggregationInput, Aggregator};
use olive::flcore::topk_sparsify;
use olive::oram::{OramConfig, OramOp, PathOram};
use olive::trace::{trace_equal, AccessTrace, NullSink};
use olive::{CtWord, Error};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const OLIVE_OK: i32 = 0;
pub const OLIVE_ERR_NULL: i32 = -1;
pub const OLIVE_ERR_INVALID: i32 = -2;
pub const OLIVE_ERR_SHAPE: i32 = -3;
pub const OLIVE_ERR_IO: i32 = -4;
pub const OLIVE_ERR_STASH_OVERFLOW: i32 = -5;
pub const OLIVE_ERR_BUFFER_TOO_SMALL: i32 = -6;
pub const OLIVE_ERR_PANIC: i32 = -99;

pub const OLIVE_ALGO_LINEAR: u32 = 0;
pub const OLIVE_ALGO_BASELINE: u32 = 1;
pub const OLIVE_ALGO_ADVANCED: u32 = 2;
pub const OLIVE_ALGO_GROUPED: u32 = 3;
pub const OLIVE_ALGO_ORAM: u32 = 4;

pub const OLIVE_SENTINEL_INDEX: u32 = u32::MAX;

/// A recorded memory-access trace.
pub struct OliveTrace {
    inner: AccessTrace,
}

/// A PathORAM instance with its own random stream.
pub struct OliveOram {
    oram: PathOram,
    rng: ChaCha8Rng,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn code_of(e: &Error) -> i32 {
    match e {
        Error::StashOverflow { .. } => OLIVE_ERR_STASH_OVERFLOW,
        Error::Io(_) => OLIVE_ERR_IO,
        Error::IndexOutOfRange { .. } | Error::Shape(_) | Error::NotPowerOfTwo(_) | Error::OramAddress { .. } => {
            OLIVE_ERR_SHAPE
        }
        _ => OLIVE_ERR_INVALID,
    }
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (i32, String)>) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => OLIVE_OK,
        Ok(Err((code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic");
            OLIVE_ERR_PANIC
        }
    }
}

fn fail(e: Error) -> (i32, String) {
    (code_of(&e), e.to_string())
}

fn null(what: &str) -> (i32, String) {
    (OLIVE_ERR_NULL, format!("{what} is null"))
}

fn aggregator(algo: u32, param: usize) -> Result<Aggregator, (i32, String)> {
    let default_oram = OramConfig::default();
    Ok(match algo {
        OLIVE_ALGO_LINEAR => Aggregator::Linear,
        OLIVE_ALGO_BASELINE => Aggregator::Baseline { cacheline_c: param.max(1) },
        OLIVE_ALGO_ADVANCED => Aggregator::Advanced,
        OLIVE_ALGO_GROUPED if param > 0 => Aggregator::Grouped { h: param },
        OLIVE_ALGO_GROUPED => return Err((OLIVE_ERR_INVALID, "grouped needs a positive group size".into())),
        OLIVE_ALGO_ORAM => Aggregator::Oram {
            bucket_size: if param == 0 { default_oram.bucket_size } else { param },
            stash_size: default_oram.stash_size,
        },
        other => return Err((OLIVE_ERR_INVALID, format!("unknown algorithm {other}"))),
    })
}

/// Copies the last error message of this thread into `buf` (NUL
/// terminated, truncated to `len`). Returns the full message length.
///
/// # Safety
/// `buf` must be null or valid for `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn olive_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn olive_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

#[no_mangle]
pub extern "C" fn olive_trace_new() -> *mut OliveTrace {
    Box::into_raw(Box::new(OliveTrace { inner: AccessTrace::new() }))
}

/// # Safety
/// `trace` must be null or a handle from [`olive_trace_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn olive_trace_free(trace: *mut OliveTrace) {
    if !trace.is_null() {
        drop(Box::from_raw(trace));
    }
}

/// Number of recorded events, or 0 for a null handle.
///
/// # Safety
/// `trace` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn olive_trace_len(trace: *const OliveTrace) -> usize {
    trace.as_ref().map_or(0, |t| t.inner.len())
}

/// Discards recorded events.
///
/// # Safety
/// `trace` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn olive_trace_clear(trace: *mut OliveTrace) -> i32 {
    guard(|| {
        let t = trace.as_mut().ok_or_else(|| null("trace"))?;
        t.inner = AccessTrace::new();
        Ok(())
    })
}

/// Writes `*out = 1` if the traces are equal at `granularity`, else 0.
///
/// # Safety
/// `a`, `b` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn olive_trace_equal(
    a: *const OliveTrace,
    b: *const OliveTrace,
    granularity: u64,
    out: *mut i32,
) -> i32 {
    guard(|| {
        let a = a.as_ref().ok_or_else(|| null("a"))?;
        let b = b.as_ref().ok_or_else(|| null("b"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        if granularity == 0 {
            return Err((OLIVE_ERR_INVALID, "granularity must be positive".into()));
        }
        *out = i32::from(trace_equal(&a.inner, &b.inner, granularity));
        Ok(())
    })
}

/// Saves the trace in the OLVT binary format.
///
/// # Safety
/// `trace` must be a live handle; `path` a NUL-terminated UTF-8 string.
#[no_mangle]
pub unsafe extern "C" fn olive_trace_save(trace: *const OliveTrace, path: *const c_char) -> i32 {
    guard(|| {
        let t = trace.as_ref().ok_or_else(|| null("trace"))?;
        if path.is_null() {
            return Err(null("path"));
        }
        let path = CStr::from_ptr(path).to_str().map_err(|_| (OLIVE_ERR_INVALID, "path is not UTF-8".into()))?;
        t.inner.save(path).map_err(fail)
    })
}

/// Aggregates `n` clients of `k` cells into the dense `out[0..d]`.
///
/// `param` is the cacheline size for baseline, the group size for grouped
/// and the bucket size for ORAM (0 = default); it is ignored otherwise.
/// When `trace` is non-null the aggregator's accesses are appended to it.
///
/// # Safety
/// `indices` and `values` must be valid for `n * k` reads, `out` for `d`
/// writes; `trace` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn olive_aggregate(
    algo: u32,
    param: usize,
    indices: *const u32,
    values: *const f32,
    n: usize,
    k: usize,
    d: usize,
    seed: u64,
    out: *mut f32,
    trace: *mut OliveTrace,
) -> i32 {
    guard(|| {
        if indices.is_null() || values.is_null() || out.is_null() {
            return Err(null("indices, values or out"));
        }
        let agg = aggregator(algo, param)?;
        let len = n.checked_mul(k).ok_or((OLIVE_ERR_SHAPE, "n * k overflows".to_string()))?;
        let idx = slice::from_raw_parts(indices, len);
        let val = slice::from_raw_parts(values, len);
        let cells = idx.iter().zip(val).map(|(&i, &v)| CtWord::pack(i, v)).collect();
        let input = AggregationInput::new(cells, n, k, d).map_err(fail)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let result = match trace.as_mut() {
            Some(t) => {
                let sink = RefCell::new(std::mem::take(&mut t.inner));
                let r = agg.run(&input, &mut rng, &sink);
                t.inner = sink.into_inner();
                r
            }
            None => agg.run(&input, &mut rng, &RefCell::new(NullSink)),
        }
        .map_err(fail)?;
        slice::from_raw_parts_mut(out, d).copy_from_slice(&result.values);
        Ok(())
    })
}

/// Top `ceil(alpha * d)` entries of `delta` by magnitude, in index order.
/// Writes the count to `*out_k`; fails with `OLIVE_ERR_BUFFER_TOO_SMALL`
/// (still setting `*out_k`) when `capacity` is smaller.
///
/// # Safety
/// `delta` must be valid for `d` reads, `out_indices`/`out_values` for
/// `capacity` writes, `out_k` writable.
#[no_mangle]
pub unsafe extern "C" fn olive_topk_sparsify(
    delta: *const f32,
    d: usize,
    alpha: f64,
    out_indices: *mut u32,
    out_values: *mut f32,
    capacity: usize,
    out_k: *mut usize,
) -> i32 {
    guard(|| {
        if delta.is_null() || out_indices.is_null() || out_values.is_null() || out_k.is_null() {
            return Err(null("argument"));
        }
        if !(alpha > 0.0 && alpha <= 1.0) || d == 0 {
            return Err((OLIVE_ERR_INVALID, "alpha must lie in (0, 1] and d must be positive".into()));
        }
        let g = topk_sparsify(slice::from_raw_parts(delta, d), alpha);
        *out_k = g.k();
        if g.k() > capacity {
            return Err((OLIVE_ERR_BUFFER_TOO_SMALL, format!("need room for {} entries", g.k())));
        }
        for (slot, &(i, v)) in g.entries().iter().enumerate() {
            *out_indices.add(slot) = i;
            *out_values.add(slot) = v;
        }
        Ok(())
    })
}

/// New ORAM of `capacity` zero-valued blocks. `bucket_size`/`stash_size`
/// of 0 select the defaults (4 and 20). Returns null on failure.
#[no_mangle]
pub extern "C" fn olive_oram_new(capacity: usize, bucket_size: usize, stash_size: usize, seed: u64) -> *mut OliveOram {
    let mut handle = ptr::null_mut();
    let status = guard(|| {
        let d = OramConfig::default();
        let config = OramConfig {
            bucket_size: if bucket_size == 0 { d.bucket_size } else { bucket_size },
            stash_size: if stash_size == 0 { d.stash_size } else { stash_size },
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let oram = PathOram::new(capacity, config, &mut rng).map_err(fail)?;
        handle = Box::into_raw(Box::new(OliveOram { oram, rng }));
        Ok(())
    });
    if status == OLIVE_OK {
        handle
    } else {
        ptr::null_mut()
    }
}

/// # Safety
/// `oram` must be null or a handle from [`olive_oram_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn olive_oram_free(oram: *mut OliveOram) {
    if !oram.is_null() {
        drop(Box::from_raw(oram));
    }
}

/// # Safety
/// `oram` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn olive_oram_read(oram: *mut OliveOram, addr: u32, out: *mut f32) -> i32 {
    guard(|| {
        let h = oram.as_mut().ok_or_else(|| null("oram"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = h.oram.read(addr, &mut h.rng, &mut NullSink).map_err(fail)?;
        Ok(())
    })
}

/// Adds `delta` to block `addr`. A stash overflow is reported as
/// `OLIVE_ERR_STASH_OVERFLOW`; the write is still applied.
///
/// # Safety
/// `oram` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn olive_oram_write_add(oram: *mut OliveOram, addr: u32, delta: f32) -> i32 {
    guard(|| {
        let h = oram.as_mut().ok_or_else(|| null("oram"))?;
        h.oram
            .access(OramOp::WriteAdd, addr, CtWord::from_f32(delta), &mut h.rng, &mut NullSink)
            .map(|_| ())
            .map_err(fail)
    })
}

/// Accesses that overflowed the stash so far, or 0 for a null handle.
///
/// # Safety
/// `oram` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn olive_oram_overflow_count(oram: *const OliveOram) -> u64 {
    oram.as_ref().map_or(0, |h| h.oram.overflow_count())
}

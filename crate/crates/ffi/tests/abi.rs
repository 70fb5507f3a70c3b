use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use olive_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; 256];
    unsafe {
        olive_last_error_message(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

// Two clients, k = 2, d = 4; client 1 has one dummy cell.
const IDX: [u32; 4] = [0, 2, 2, OLIVE_SENTINEL_INDEX];
const VAL: [f32; 4] = [1.0, 2.0, 0.5, 0.0];

#[test]
fn every_algorithm_matches_scatter_add() {
    for (algo, param) in [
        (OLIVE_ALGO_LINEAR, 0),
        (OLIVE_ALGO_BASELINE, 2),
        (OLIVE_ALGO_ADVANCED, 0),
        (OLIVE_ALGO_GROUPED, 1),
        (OLIVE_ALGO_ORAM, 0),
    ] {
        let mut out = [9.0f32; 4];
        let rc = unsafe { olive_aggregate(algo, param, IDX.as_ptr(), VAL.as_ptr(), 2, 2, 4, 7, out.as_mut_ptr(), ptr::null_mut()) };
        assert_eq!(rc, OLIVE_OK, "algo {algo}: {}", last_error());
        assert_eq!(out, [1.0, 0.0, 2.5, 0.0], "algo {algo}");
    }
}

#[test]
fn traces_through_handles() {
    unsafe {
        let a = olive_trace_new();
        let b = olive_trace_new();
        let other_idx = [3u32, 1, 0, OLIVE_SENTINEL_INDEX];
        let mut out = [0.0f32; 4];
        assert_eq!(olive_aggregate(OLIVE_ALGO_ADVANCED, 0, IDX.as_ptr(), VAL.as_ptr(), 2, 2, 4, 0, out.as_mut_ptr(), a), OLIVE_OK);
        assert_eq!(olive_aggregate(OLIVE_ALGO_ADVANCED, 0, other_idx.as_ptr(), VAL.as_ptr(), 2, 2, 4, 0, out.as_mut_ptr(), b), OLIVE_OK);
        assert!(olive_trace_len(a) > 0);
        let mut eq = -1;
        assert_eq!(olive_trace_equal(a, b, 1, &mut eq), OLIVE_OK);
        assert_eq!(eq, 1);

        olive_trace_clear(a);
        olive_trace_clear(b);
        olive_aggregate(OLIVE_ALGO_LINEAR, 0, IDX.as_ptr(), VAL.as_ptr(), 2, 2, 4, 0, out.as_mut_ptr(), a);
        olive_aggregate(OLIVE_ALGO_LINEAR, 0, other_idx.as_ptr(), VAL.as_ptr(), 2, 2, 4, 0, out.as_mut_ptr(), b);
        assert_eq!(olive_trace_equal(a, b, 1, &mut eq), OLIVE_OK);
        assert_eq!(eq, 0);

        let dir = tempfile::tempdir().unwrap();
        let path = CString::new(dir.path().join("t.olvt").to_str().unwrap()).unwrap();
        assert_eq!(olive_trace_save(a, path.as_ptr()), OLIVE_OK);
        let bad = CString::new("/nonexistent/dir/t.olvt").unwrap();
        assert_eq!(olive_trace_save(a, bad.as_ptr()), OLIVE_ERR_IO);

        olive_trace_free(a);
        olive_trace_free(b);
        olive_trace_free(ptr::null_mut());
    }
}

#[test]
fn errors_are_codes_with_messages() {
    let mut out = [0.0f32; 4];
    unsafe {
        let rc = olive_aggregate(OLIVE_ALGO_LINEAR, 0, IDX.as_ptr(), VAL.as_ptr(), 2, 2, 2, 0, out.as_mut_ptr(), ptr::null_mut());
        assert_eq!(rc, OLIVE_ERR_SHAPE);
        assert!(last_error().contains("out of range"), "{}", last_error());
        let rc = olive_aggregate(OLIVE_ALGO_GROUPED, 0, IDX.as_ptr(), VAL.as_ptr(), 2, 2, 4, 0, out.as_mut_ptr(), ptr::null_mut());
        assert_eq!(rc, OLIVE_ERR_INVALID);
        let rc = olive_aggregate(99, 0, IDX.as_ptr(), VAL.as_ptr(), 2, 2, 4, 0, out.as_mut_ptr(), ptr::null_mut());
        assert_eq!(rc, OLIVE_ERR_INVALID);
        let rc = olive_aggregate(OLIVE_ALGO_LINEAR, 0, ptr::null(), VAL.as_ptr(), 2, 2, 4, 0, out.as_mut_ptr(), ptr::null_mut());
        assert_eq!(rc, OLIVE_ERR_NULL);
        // Truncation keeps the terminator and reports the full length.
        let mut small = [1 as std::ffi::c_char; 4];
        let full = olive_last_error_message(small.as_mut_ptr(), small.len());
        assert!(full > 3);
        assert_eq!(small[3], 0);
    }
}

#[test]
fn topk_and_oram() {
    let delta = [0.1f32, -5.0, 3.0, 0.0];
    let mut idx = [0u32; 4];
    let mut val = [0.0f32; 4];
    let mut k = 0usize;
    unsafe {
        assert_eq!(olive_topk_sparsify(delta.as_ptr(), 4, 0.5, idx.as_mut_ptr(), val.as_mut_ptr(), 4, &mut k), OLIVE_OK);
        assert_eq!((k, &idx[..2], &val[..2]), (2, &[1u32, 2][..], &[-5.0f32, 3.0][..]));
        assert_eq!(olive_topk_sparsify(delta.as_ptr(), 4, 1.0, idx.as_mut_ptr(), val.as_mut_ptr(), 1, &mut k), OLIVE_ERR_BUFFER_TOO_SMALL);
        assert_eq!(k, 4);

        let oram = olive_oram_new(16, 0, 0, 3);
        assert!(!oram.is_null());
        for i in 0..16 {
            assert_eq!(olive_oram_write_add(oram, i, i as f32), OLIVE_OK);
        }
        assert_eq!(olive_oram_write_add(oram, 5, 0.5), OLIVE_OK);
        let mut v = 0.0f32;
        assert_eq!(olive_oram_read(oram, 5, &mut v), OLIVE_OK);
        assert_eq!(v, 5.5);
        assert_eq!(olive_oram_read(oram, 16, &mut v), OLIVE_ERR_SHAPE);
        assert_eq!(olive_oram_overflow_count(oram), 0);
        olive_oram_free(oram);
        assert!(olive_oram_new(0, 0, 0, 0).is_null());
        assert!(!CStr::from_ptr(olive_version()).to_bytes().is_empty());
    }
}

// Compiles a C program against the generated header and the static library.
#[test]
fn c_program_links_against_header() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let header_dir = manifest.join("include");
    assert!(header_dir.join("olive.h").exists());
    let profile_dir = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf();
    let lib = profile_dir.join("libolive_ffi.a");
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    if !lib.exists() || Command::new(&cc).arg("--version").output().is_err() {
        eprintln!("skipping C link test: no static library at {} or no C compiler", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(
        &src,
        r#"#include "olive.h"
#include <stdio.h>
int main(void) {
    uint32_t idx[2] = {1, OLIVE_SENTINEL_INDEX};
    float val[2] = {2.5f, 0.0f};
    float out[3] = {0};
    OliveTrace *t = olive_trace_new();
    int32_t rc = olive_aggregate(OLIVE_ALGO_ADVANCED, 0, idx, val, 1, 2, 3, 0, out, t);
    size_t events = olive_trace_len(t);
    olive_trace_free(t);
    if (rc != OLIVE_OK || out[1] != 2.5f || events == 0) return 1;
    printf("ok %zu\n", events);
    return 0;
}
"#,
    )
    .unwrap();
    let exe = dir.path().join("smoke");
    let status = Command::new(&cc)
        .arg(&src)
        .arg("-I")
        .arg(&header_dir)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "C compile failed");
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok "));
}

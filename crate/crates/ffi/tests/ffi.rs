use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use warpbench_ffi::*;

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(wb_last_error()) }.to_string_lossy().into_owned()
}

#[test]
fn fmap_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let file = cstr(&dir.path().join("a.fmap"));
    let data: Vec<f32> = (0..2 * 3 * 2).map(|v| v as f32 * 0.25).collect();
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(wb_fmap_new(2, 3, 2, data.as_ptr(), &mut m), WbStatus::Ok);
        assert_eq!(wb_fmap_write(m, file.as_ptr()), WbStatus::Ok);
        let mut r = ptr::null_mut();
        assert_eq!(wb_fmap_read(file.as_ptr(), &mut r), WbStatus::Ok);
        let (mut h, mut w, mut c) = (0, 0, 0);
        assert_eq!(wb_fmap_shape(r, &mut h, &mut w, &mut c), WbStatus::Ok);
        assert_eq!((h, w, c), (2, 3, 2));
        assert_eq!(std::slice::from_raw_parts(wb_fmap_data(r), 12), &data[..]);
        wb_fmap_free(m);
        wb_fmap_free(r);
    }
}

#[test]
fn errors_map_to_status_codes() {
    let dir = tempfile::tempdir().unwrap();
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(wb_fmap_read(ptr::null(), &mut m), WbStatus::InvalidArgument);
        assert!(last_error().contains("null"));

        let missing = cstr(&dir.path().join("missing.fmap"));
        assert_eq!(wb_fmap_read(missing.as_ptr(), &mut m), WbStatus::Io);

        let junk = dir.path().join("junk.fmap");
        std::fs::write(&junk, b"NOPE0000").unwrap();
        assert_eq!(wb_fmap_read(cstr(&junk).as_ptr(), &mut m), WbStatus::Format);

        let nan = [f32::NAN];
        assert_eq!(wb_fmap_new(1, 1, 1, nan.as_ptr(), &mut m), WbStatus::InvalidArgument);
        assert!(m.is_null());

        let (mut a, mut b) = (ptr::null_mut(), ptr::null_mut());
        assert_eq!(wb_sample_generate(64, 0, 1, &mut a), WbStatus::Ok);
        assert_eq!(wb_sample_generate(96, 0, 1, &mut b), WbStatus::Ok);
        let (mut ba, mut bb) = (ptr::null_mut(), ptr::null_mut());
        assert_eq!(wb_sample_backward_map(a, &mut ba), WbStatus::Ok);
        assert_eq!(wb_sample_backward_map(b, &mut bb), WbStatus::Ok);
        let mut e = 0.0;
        assert_eq!(wb_epe(ba, bb, &mut e), WbStatus::Shape);
        let msg = last_error();
        assert!(msg.contains("64x64x2") && msg.contains("96x96x2"), "{msg}");
        wb_backward_map_free(ba);
        wb_backward_map_free(bb);
        wb_sample_free(a);
        wb_sample_free(b);

        let bad = CString::new("{\"resolution\": \"big\"}").unwrap();
        assert_eq!(wb_sample_generate_json(bad.as_ptr(), &mut a), WbStatus::Format);
        wb_fmap_free(ptr::null_mut());
    }
}

#[test]
fn sample_evaluates_to_zero_at_truth() {
    unsafe {
        let mut s = ptr::null_mut();
        assert_eq!(wb_sample_generate(128, 1, 7, &mut s), WbStatus::Ok);
        let mut b = ptr::null_mut();
        assert_eq!(wb_sample_backward_map(s, &mut b), WbStatus::Ok);

        let mut e = -1.0;
        assert_eq!(wb_epe(b, b, &mut e), WbStatus::Ok);
        assert_eq!(e, 0.0);

        let mut json = ptr::null_mut();
        assert_eq!(wb_evaluate(s, b, ptr::null(), &mut json), WbStatus::InvalidArgument);
        assert!(last_error().contains("MS-SSIM levels"));
        let three = CString::new("{\"levels\": 3}").unwrap();
        assert_eq!(wb_evaluate(s, b, three.as_ptr(), &mut json), WbStatus::Ok);
        let report: serde_json::Value = serde_json::from_str(CStr::from_ptr(json).to_str().unwrap()).unwrap();
        wb_string_free(json);
        assert_eq!(report["ed"], 0.0);
        assert_eq!(report["ms_ssim"], 1.0);

        let opts = CString::new("{\"levels\": 9}").unwrap();
        assert_eq!(wb_evaluate(s, b, opts.as_ptr(), &mut json), WbStatus::InvalidArgument);

        let (mut img, mut flat) = (ptr::null_mut(), ptr::null_mut());
        assert_eq!(wb_sample_warped(s, &mut img), WbStatus::Ok);
        assert_eq!(wb_rectify(img, b, &mut flat), WbStatus::Ok);
        let (mut h, mut w, mut c) = (0, 0, 0);
        assert_eq!(wb_image_shape(flat, &mut h, &mut w, &mut c), WbStatus::Ok);
        assert_eq!((h, w, c), (128, 128, 3));

        let (mut values, mut mask) = (ptr::null_mut(), ptr::null_mut());
        assert_eq!(wb_backward_map_angles(b, &mut values, &mut mask), WbStatus::Ok);
        assert_eq!(wb_fmap_shape(values, ptr::null_mut(), ptr::null_mut(), &mut c), WbStatus::Ok);
        assert_eq!(c, 4);

        let (mut coords, mut valid) = (ptr::null_mut(), ptr::null_mut());
        assert_eq!(wb_backward_map_parts(b, &mut coords, &mut valid), WbStatus::Ok);
        let mut rebuilt = ptr::null_mut();
        assert_eq!(wb_backward_map_new(coords, valid, &mut rebuilt), WbStatus::Ok);
        assert_eq!(wb_epe(rebuilt, b, &mut e), WbStatus::Ok);
        assert_eq!(e, 0.0);

        for m in [values, mask, coords, valid] {
            wb_fmap_free(m);
        }
        wb_backward_map_free(rebuilt);
        wb_image_free(img);
        wb_image_free(flat);
        wb_backward_map_free(b);
        wb_sample_free(s);
    }
}

#[test]
fn sample_save_load_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let d = cstr(dir.path());
    unsafe {
        let (mut s, mut t) = (ptr::null_mut(), ptr::null_mut());
        assert_eq!(wb_sample_generate(64, 2, 3, &mut s), WbStatus::Ok);
        assert_eq!(wb_sample_save(s, d.as_ptr()), WbStatus::Ok);
        assert_eq!(wb_sample_load(d.as_ptr(), &mut t), WbStatus::Ok);
        let (mut a, mut b) = (ptr::null_mut(), ptr::null_mut());
        wb_sample_backward_map(s, &mut a);
        wb_sample_backward_map(t, &mut b);
        let mut e = -1.0;
        assert_eq!(wb_epe(a, b, &mut e), WbStatus::Ok);
        assert_eq!(e, 0.0);
        wb_backward_map_free(a);
        wb_backward_map_free(b);
        wb_sample_free(s);
        wb_sample_free(t);
    }
}

fn target_dir() -> PathBuf {
    // target/<profile>/deps/<test-binary>
    std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn header_links_from_c() {
    let lib = target_dir().join("libwarpbench_ffi.a");
    if Command::new("cc").arg("--version").output().is_err() || !lib.exists() {
        eprintln!("skipping: no C compiler or static library");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(
        &src,
        r#"#include <stdio.h>
#include "warpbench.h"
int main(void) {
    WbSample *s = NULL;
    WbBackwardMap *b = NULL;
    double e = -1.0;
    if (wb_sample_generate(64, 1, 2, &s) != WB_STATUS_OK) return 1;
    if (wb_sample_backward_map(s, &b) != WB_STATUS_OK) return 2;
    if (wb_epe(b, b, &e) != WB_STATUS_OK || e != 0.0) return 3;
    if (wb_epe(NULL, b, &e) != WB_STATUS_INVALID_ARGUMENT || wb_last_error() == NULL) return 4;
    printf("%s\n", wb_version());
    wb_backward_map_free(b);
    wb_sample_free(s);
    return 0;
}
"#,
    )
    .unwrap();
    let exe = dir.path().join("smoke");
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(&include)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "{:?}", out);
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), env!("CARGO_PKG_VERSION"));
}

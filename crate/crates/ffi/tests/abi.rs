use std::ffi::{CStr, CString};
use std::ptr;

use autolabel_ffi::*;

fn last_error() -> String {
    let p = al_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn small_pipeline() -> *mut AlPipeline {
    let toml = CString::new("[world]\nnum_frames = 30\nnum_objects = 3\n").unwrap();
    let mut p = ptr::null_mut();
    assert_eq!(unsafe { al_pipeline_new(toml.as_ptr(), &mut p) }, AlStatus::Ok);
    assert_eq!(unsafe { al_pipeline_use_oracle(p) }, AlStatus::Ok);
    p
}

#[test]
fn oracle_annotation_scores_perfectly() {
    let p = small_pipeline();
    let id = CString::new("abi").unwrap();
    let mut a = ptr::null_mut();
    assert_eq!(unsafe { al_annotate_synthetic(p, id.as_ptr(), ptr::null(), false, &mut a) }, AlStatus::Ok);
    assert_eq!(unsafe { al_annotation_frame_count(a) }, 30);
    assert_eq!(unsafe { al_annotation_track_count(a) }, 3);
    let mut s = AlScores::default();
    assert_eq!(unsafe { al_annotation_evaluate(a, &mut s) }, AlStatus::Ok);
    assert_eq!((s.mota, s.idf1, s.idsw), (1.0, 1.0, 0));

    let dir = tempfile::tempdir().unwrap();
    let d = CString::new(dir.path().to_str().unwrap()).unwrap();
    assert_eq!(unsafe { al_annotation_write(a, d.as_ptr()) }, AlStatus::Ok);
    let mot = CString::new(dir.path().join("abi.mot.txt").to_str().unwrap()).unwrap();
    let mut self_scores = AlScores::default();
    assert_eq!(unsafe { al_evaluate_mot(mot.as_ptr(), mot.as_ptr(), 0.5, &mut self_scores) }, AlStatus::Ok);
    assert_eq!(self_scores.mota, 1.0);
    unsafe {
        al_annotation_free(a);
        al_pipeline_free(p);
    }
}

#[test]
fn checkpointed_chunk_run_matches_plain_run() {
    let p = small_pipeline();
    assert_eq!(unsafe { al_pipeline_set_mode(p, AlRunMode::Chunk) }, AlStatus::Ok);
    let id = CString::new("ck").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let d = CString::new(dir.path().to_str().unwrap()).unwrap();
    let (mut a, mut b) = (ptr::null_mut(), ptr::null_mut());
    assert_eq!(unsafe { al_annotate_synthetic(p, id.as_ptr(), ptr::null(), false, &mut a) }, AlStatus::Ok);
    assert_eq!(unsafe { al_annotate_synthetic(p, id.as_ptr(), d.as_ptr(), false, &mut b) }, AlStatus::Ok);
    let (mut chunked, mut fell_back) = (false, true);
    assert_eq!(unsafe { al_annotation_mode(b, &mut chunked, &mut fell_back) }, AlStatus::Ok);
    assert!(chunked && !fell_back);
    let (mut sa, mut sb) = (AlScores::default(), AlScores::default());
    unsafe {
        al_annotation_evaluate(a, &mut sa);
        al_annotation_evaluate(b, &mut sb);
    }
    assert_eq!(sa, sb);
    unsafe {
        al_annotation_free(a);
        al_annotation_free(b);
        al_pipeline_free(p);
    }
}

#[test]
fn errors_carry_status_and_message() {
    let missing = CString::new("/nonexistent/pred.txt").unwrap();
    let mut s = AlScores::default();
    assert_eq!(unsafe { al_evaluate_mot(missing.as_ptr(), missing.as_ptr(), 0.5, &mut s) }, AlStatus::Io);
    assert!(last_error().contains("nonexistent"));

    let bad = [0xffu8, 0];
    let mut p = ptr::null_mut();
    assert_eq!(unsafe { al_pipeline_new(bad.as_ptr().cast(), &mut p) }, AlStatus::InvalidUtf8);

    let mut t = 0.0;
    assert_eq!(unsafe { al_dynamic_threshold(ptr::null(), 3, AlThresholdMethod::Kmeans, 0.1, &mut t) }, AlStatus::NullArgument);
    assert_eq!(unsafe { al_mask_iou(ptr::null(), ptr::null(), 2, 2, &mut t) }, AlStatus::NullArgument);
    unsafe {
        al_pipeline_free(ptr::null_mut());
        al_annotation_free(ptr::null_mut());
    }
}

#[test]
fn numeric_helpers() {
    let scores = [0.05, 0.1, 0.5, 0.55, 0.9, 0.95];
    let mut t = 0.0;
    let s = unsafe { al_dynamic_threshold(scores.as_ptr(), scores.len(), AlThresholdMethod::Kmeans, 0.0, &mut t) };
    assert_eq!(s, AlStatus::Ok);
    assert_eq!(t, 0.5);
    assert_eq!(unsafe { al_dynamic_threshold(ptr::null(), 0, AlThresholdMethod::MeanStd, 0.2, &mut t) }, AlStatus::Ok);
    assert_eq!(t, 0.2);

    let a = [1u8, 1, 0, 0];
    let b = [1u8, 0, 1, 0];
    assert_eq!(unsafe { al_mask_iou(a.as_ptr(), b.as_ptr(), 2, 2, &mut t) }, AlStatus::Ok);
    assert!((t - 1.0 / 3.0).abs() < 1e-12);
    let v = unsafe { CStr::from_ptr(al_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_every_export() {
    let h = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/autolabel.h")).unwrap();
    for f in [
        "al_version",
        "al_last_error",
        "al_pipeline_new",
        "al_pipeline_free",
        "al_pipeline_set_seed",
        "al_pipeline_set_mode",
        "al_pipeline_use_oracle",
        "al_annotate_synthetic",
        "al_annotation_free",
        "al_annotation_track_count",
        "al_annotation_frame_count",
        "al_annotation_mode",
        "al_annotation_write",
        "al_annotation_evaluate",
        "al_evaluate_mot",
        "al_dynamic_threshold",
        "al_mask_iou",
        "al_abi_version",
    ] {
        assert!(h.contains(&format!("{f}(")), "{f} missing from header");
    }
    assert!(h.contains("typedef struct AlPipeline AlPipeline;"));
    assert!(h.contains("AL_STATUS_OK = 0"));
}

#[test]
fn c_program_links_against_static_library() {
    let Ok(cc) = which("cc") else {
        eprintln!("no C compiler on PATH; C link check skipped");
        return;
    };
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR"));
    let built = std::process::Command::new(env!("CARGO"))
        .args(["build", "--quiet", "-p", "autolabel-ffi", "--lib"])
        .current_dir(root)
        .status()
        .unwrap();
    assert!(built.success());
    let lib = root.join("../../target/debug/libautolabel_ffi.a");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(
        &src,
        r#"#include "autolabel.h"
#include <stdio.h>
int main(void) {
    AlPipeline *p = NULL;
    if (al_pipeline_new("[world]\nnum_frames = 12\nnum_objects = 2\n", &p) != AL_STATUS_OK) return 1;
    al_pipeline_use_oracle(p);
    AlAnnotation *a = NULL;
    if (al_annotate_synthetic(p, "c", NULL, false, &a) != AL_STATUS_OK) { fprintf(stderr, "%s\n", al_last_error()); return 2; }
    AlScores s;
    if (al_annotation_evaluate(a, &s) != AL_STATUS_OK) return 3;
    printf("%zu %.3f\n", al_annotation_track_count(a), s.mota);
    al_annotation_free(a);
    al_pipeline_free(p);
    return al_pipeline_new("[chunker]\nomega = 99\n", &p) == AL_STATUS_INVALID_CONFIG ? 0 : 4;
}
"#,
    )
    .unwrap();
    let exe = dir.path().join("main");
    let status = std::process::Command::new(cc)
        .arg(&src)
        .arg("-I")
        .arg(root.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success());
    let out = std::process::Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "2 1.000");
}

fn which(name: &str) -> Result<std::path::PathBuf, ()> {
    std::env::var_os("PATH")
        .and_then(|paths| std::env::split_paths(&paths).map(|p| p.join(name)).find(|p| p.exists()))
        .ok_or(())
}

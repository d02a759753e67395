use std::ffi::{CStr, CString};
use std::ptr;

use anoncount_ffi::*;

fn start(n: u32, scheduler: &str, mode: AncMode, inputs: &[u64]) -> (AncStatus, *mut AncRun) {
    let name = CString::new(scheduler).unwrap();
    let mut run = ptr::null_mut();
    let ptr = if inputs.is_empty() { ptr::null() } else { inputs.as_ptr() };
    let status = unsafe { anc_run(n, name.as_ptr(), 3, mode, ptr, inputs.len(), true, &mut run) };
    (status, run)
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(anc_last_error()) }.to_string_lossy().into_owned()
}

#[test]
fn basic_run_reports_count_and_metrics() {
    let (status, run) = start(6, "path", AncMode::Basic, &[]);
    assert_eq!(status, AncStatus::Ok);
    let mut count = 0;
    assert_eq!(unsafe { anc_run_count(run, &mut count) }, AncStatus::Ok);
    assert_eq!(count, 6);
    let mut m = AncMetrics::default();
    assert_eq!(unsafe { anc_run_metrics(run, &mut m) }, AncStatus::Ok);
    assert!(m.passed && m.correct && m.resets > 0);
    assert!(m.rounds <= anc_round_bound(6));
    assert!(m.count_level >= 1);
    let mut len = 9;
    assert_eq!(unsafe { anc_run_violation_count(run, &mut len) }, AncStatus::Ok);
    assert_eq!(len, 0);
    let mut text = ptr::null();
    assert_eq!(unsafe { anc_run_violation(run, 0, &mut text) }, AncStatus::IndexOutOfRange);
    assert_eq!(unsafe { anc_run_input_classes(run, &mut len) }, AncStatus::NoOutput);
    unsafe { anc_run_free(run) };
}

#[test]
fn generalized_run_reports_inputs() {
    let (status, run) = start(4, "random-connected", AncMode::Generalized, &[0, 5, 5, 8]);
    assert_eq!(status, AncStatus::Ok);
    let mut len = 0;
    assert_eq!(unsafe { anc_run_input_classes(run, &mut len) }, AncStatus::Ok);
    let mut got = Vec::new();
    for i in 0..len {
        let (mut v, mut c) = (0, 0);
        assert_eq!(unsafe { anc_run_input_at(run, i, &mut v, &mut c) }, AncStatus::Ok);
        got.push((v, c));
    }
    assert_eq!(got, vec![(5, 2), (8, 1)]);
    let mut count = 0;
    assert_eq!(unsafe { anc_run_count(run, &mut count) }, AncStatus::NoOutput);
    unsafe { anc_run_free(run) };
}

#[test]
fn bad_arguments_are_reported() {
    assert_eq!(start(0, "star", AncMode::Basic, &[]).0, AncStatus::InvalidArgument);
    assert!(last_error().contains("at least 1"));
    assert_eq!(start(3, "hypercube", AncMode::Basic, &[]).0, AncStatus::InvalidArgument);
    assert!(last_error().contains("hypercube"));
    assert_eq!(start(3, "star", AncMode::Generalized, &[1]).0, AncStatus::InvalidArgument);
    let mut run = ptr::null_mut();
    let status = unsafe { anc_run(3, ptr::null(), 0, AncMode::Basic, ptr::null(), 0, false, &mut run) };
    assert_eq!(status, AncStatus::NullPointer);
    assert_eq!(unsafe { anc_run_count(ptr::null(), ptr::null_mut()) }, AncStatus::NullPointer);
    unsafe { anc_run_free(ptr::null_mut()) };
}

#[test]
fn header_declares_the_api() {
    let header = include_str!("../include/anoncount.h");
    for name in [
        "anc_run(",
        "anc_run_free(",
        "anc_run_count(",
        "anc_run_metrics(",
        "anc_last_error(",
        "typedef struct AncRun AncRun;",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
}

#[test]
fn c_program_links_against_the_static_library() {
    let Ok(exe) = std::env::current_exe() else { return };
    let profile_dir = exe.parent().and_then(|d| d.parent()).unwrap().to_path_buf();
    let lib = profile_dir.join("libanoncount_ffi.a");
    if !lib.exists() || std::process::Command::new("cc").arg("--version").output().is_err() {
        eprintln!("skipping: static library or C compiler unavailable");
        return;
    }
    let dir = env!("CARGO_MANIFEST_DIR");
    let bin = tempfile::tempdir().unwrap();
    let out = bin.path().join("smoke");
    let status = std::process::Command::new("cc")
        .args([&format!("{dir}/tests/c/smoke.c"), "-I", &format!("{dir}/include"), "-o"])
        .arg(&out)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .status()
        .unwrap();
    assert!(status.success(), "C compilation failed");
    let run = std::process::Command::new(&out).output().unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    assert_eq!(String::from_utf8_lossy(&run.stdout).trim(), "count 5 passed 1");
}

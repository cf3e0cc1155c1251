use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use tailatlas_ffi::*;

const SWAP: &str = r#"{"mode": "decompose",
  "base": {"transition": [["1/2", "1/2"], ["1/2", "1/2"]]},
  "fiber": {"kind": "finite", "size": 2, "maps": [[0, 1], [1, 0]]}}"#;

fn last_error() -> String {
    unsafe { CStr::from_ptr(ta_last_error()) }.to_string_lossy().into_owned()
}

#[test]
fn run_returns_a_report_handle() {
    let cfg = CString::new(SWAP).unwrap();
    let mut rep = ptr::null_mut();
    assert_eq!(unsafe { ta_run(cfg.as_ptr(), &mut rep) }, TaStatus::Ok);
    assert!(!rep.is_null());
    let json = unsafe { CStr::from_ptr(ta_report_json(rep)) }.to_str().unwrap().to_owned();
    assert_eq!(unsafe { ta_report_exit_code(rep) }, 0);
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["header"]["tool"], "tailatlas");
    unsafe { ta_report_free(rep) };
}

#[test]
fn bad_config_sets_status_and_message() {
    let cfg = CString::new(SWAP.replace(r#"["1/2", "1/2"], ["1/2""#, r#"["1/2", "1/4"], ["1/2""#)).unwrap();
    let mut rep = ptr::null_mut();
    assert_eq!(unsafe { ta_run(cfg.as_ptr(), &mut rep) }, TaStatus::InvalidConfig);
    assert!(rep.is_null());
    assert!(last_error().contains(".base.transition[0]"), "{}", last_error());
    assert_eq!(unsafe { ta_run(ptr::null(), &mut rep) }, TaStatus::NullPointer);
    assert_eq!(unsafe { ta_run(cfg.as_ptr(), ptr::null_mut()) }, TaStatus::NullPointer);
    assert_eq!(unsafe { ta_report_exit_code(ptr::null()) }, -1);
    unsafe { ta_report_free(ptr::null_mut()) };
}

#[test]
fn lorentz_handle_steps_and_conserves_speed() {
    let name = CString::new("finite-horizon-square").unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { ta_lorentz_preset(name.as_ptr(), &mut h) }, TaStatus::Ok);
    let mut le = TaLineElement { scatterer: 0, cell: [0; 2], theta: 0.0, velocity: [0.0; 2] };
    assert_eq!(unsafe { ta_lorentz_sample(h, 3, 0, &mut le) }, TaStatus::Ok);
    let mut cell = le.cell;
    for _ in 0..1000 {
        let mut ev = TaCollision { next: le, displacement: [0; 2], flight_time: 0.0 };
        assert_eq!(unsafe { ta_lorentz_step(h, &le, &mut ev) }, TaStatus::Ok, "{}", last_error());
        assert!(ev.flight_time > 0.0);
        cell = [cell[0] + ev.displacement[0], cell[1] + ev.displacement[1]];
        assert_eq!(cell, ev.next.cell);
        let s = ev.next.velocity[0].hypot(ev.next.velocity[1]);
        assert!((s - 1.0).abs() < 1e-12);
        le = ev.next;
    }
    le.scatterer = 9;
    let mut ev = TaCollision { next: le, displacement: [0; 2], flight_time: 0.0 };
    assert_eq!(unsafe { ta_lorentz_step(h, &le, &mut ev) }, TaStatus::InvalidConfig);
    unsafe { ta_lorentz_free(h) };

    let bad = CString::new("no-such-table").unwrap();
    assert_eq!(unsafe { ta_lorentz_preset(bad.as_ptr(), &mut h) }, TaStatus::InvalidConfig);
    let json = CString::new(r#"{"geometry": {"kind": "tube", "length": 1, "width": 1}, "scatterers": [], "horizon_cells": 2}"#).unwrap();
    assert_eq!(unsafe { ta_lorentz_from_json(json.as_ptr(), &mut h) }, TaStatus::InvalidConfig);
    assert!(h.is_null());
}

#[test]
fn version_is_static() {
    let v = unsafe { CStr::from_ptr(ta_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_and_links_from_c() {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let header = root.join("include/tailatlas.h");
    assert!(header.exists());
    let deps = std::env::current_exe().unwrap().parent().unwrap().to_path_buf();
    let lib = deps.parent().unwrap().join("libtailatlas_ffi.a");
    if !lib.exists() {
        panic!("static library not found at {}", lib.display());
    }
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR"));
    let src = dir.join("smoke.c");
    std::fs::write(
        &src,
        r#"#include "tailatlas.h"
#include <stdio.h>
#include <string.h>
int main(void) {
    TaLorentz *h = NULL;
    if (ta_lorentz_preset("finite-horizon-square", &h) != TA_STATUS_OK) return 3;
    TaLineElement le;
    if (ta_lorentz_sample(h, 1, 0, &le) != TA_STATUS_OK) return 4;
    TaCollision ev;
    for (int i = 0; i < 10; i++) {
        if (ta_lorentz_step(h, &le, &ev) != TA_STATUS_OK) return 5;
        le = ev.next;
    }
    ta_lorentz_free(h);
    TaReport *r = NULL;
    if (ta_run("{\"mode\": \"nope\"}", &r) != TA_STATUS_INVALID_CONFIG) return 6;
    if (strlen(ta_last_error()) == 0) return 7;
    printf("%s\n", ta_version());
    return 0;
}
"#,
    )
    .unwrap();
    let exe = dir.join("smoke");
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(root.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .expect("C compiler available");
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), env!("CARGO_PKG_VERSION"));
}

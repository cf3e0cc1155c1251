//! C ABI over the tailatlas engines.
//!
//! Every entry point returns a [`TaStatus`]; on failure the message is
//! available from [`ta_last_error`] on the same thread. Handles are opaque
//! and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use tailatlas::cli_io::{parse_config, run};
use tailatlas::lorentz_gas::{billiard_step, sample_invariant_measure, LineElement, LorentzConfig};
use tailatlas::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidConfig = 3,
    HypothesisNotMet = 4,
    Inconclusive = 5,
    CertificationFailed = 6,
    Lorentz = 7,
    Engine = 8,
    Panic = 9,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let s = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = s);
}

fn status_of(e: &Error) -> TaStatus {
    match e {
        Error::Config(_) | Error::InvalidBase(_) | Error::InvalidAction(_) | Error::InvalidLorentz(_) => {
            TaStatus::InvalidConfig
        }
        Error::HypothesisNotMet { .. } | Error::NotBMeasurable(_) => TaStatus::HypothesisNotMet,
        Error::Inconclusive(_) | Error::WindowUnderflow(_) => TaStatus::Inconclusive,
        Error::CertificationFailed { .. } | Error::SlowMixing { .. } => TaStatus::CertificationFailed,
        Error::HorizonEscape { .. } | Error::Singular(_) => TaStatus::Lorentz,
        _ => TaStatus::Engine,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (TaStatus, String)>) -> TaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TaStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside tailatlas");
            TaStatus::Panic
        }
    }
}

fn engine(e: Error) -> (TaStatus, String) {
    (status_of(&e), e.to_string())
}

unsafe fn read_str<'a>(p: *const c_char) -> Result<&'a str, (TaStatus, String)> {
    if p.is_null() {
        return Err((TaStatus::NullPointer, "null string argument".into()));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| (TaStatus::InvalidUtf8, e.to_string()))
}

fn null(what: &str) -> (TaStatus, String) {
    (TaStatus::NullPointer, format!("null {what}"))
}

/// Message of the last failed call on this thread. Valid until the next
/// failing call on the same thread; empty when nothing failed.
#[no_mangle]
pub extern "C" fn ta_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version, static storage.
#[no_mangle]
pub extern "C" fn ta_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// A finished run.
pub struct TaReport {
    json: CString,
    exit_code: i32,
}

/// Parses a JSON run config and executes it.
///
/// # Safety
/// `config_json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ta_run(config_json: *const c_char, out: *mut *mut TaReport) -> TaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("output pointer"));
        }
        *out = ptr::null_mut();
        let text = read_str(config_json)?;
        let cfg = parse_config(text).map_err(engine)?;
        let output = run(&cfg).map_err(engine)?;
        let json = CString::new(output.report.to_json()).map_err(|e| (TaStatus::Engine, e.to_string()))?;
        *out = Box::into_raw(Box::new(TaReport { json, exit_code: output.report.exit_code() }));
        Ok(())
    })
}

/// Report JSON owned by the handle.
///
/// # Safety
/// `report` must come from [`ta_run`] and not be freed.
#[no_mangle]
pub unsafe extern "C" fn ta_report_json(report: *const TaReport) -> *const c_char {
    match report.as_ref() {
        Some(r) => r.json.as_ptr(),
        None => ptr::null(),
    }
}

/// 0 when every check passed, 2 otherwise, -1 for a null handle.
///
/// # Safety
/// `report` must come from [`ta_run`] and not be freed.
#[no_mangle]
pub unsafe extern "C" fn ta_report_exit_code(report: *const TaReport) -> i32 {
    report.as_ref().map_or(-1, |r| r.exit_code)
}

/// # Safety
/// `report` must come from [`ta_run`] or be null.
#[no_mangle]
pub unsafe extern "C" fn ta_report_free(report: *mut TaReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// A scatterer configuration.
pub struct TaLorentz {
    config: LorentzConfig,
}

/// Line element in flat form. `cell[1]` is 0 for tubes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaLineElement {
    pub scatterer: u32,
    pub cell: [i64; 2],
    pub theta: f64,
    pub velocity: [f64; 2],
}

/// Result of one collision step.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaCollision {
    pub next: TaLineElement,
    pub displacement: [i64; 2],
    pub flight_time: f64,
}

fn flatten(le: &LineElement) -> TaLineElement {
    let mut cell = [0; 2];
    for (c, v) in cell.iter_mut().zip(&le.cell) {
        *c = *v;
    }
    TaLineElement { scatterer: le.scatterer as u32, cell, theta: le.theta, velocity: le.velocity }
}

fn unflatten(le: &TaLineElement, config: &LorentzConfig) -> LineElement {
    LineElement {
        scatterer: le.scatterer as usize,
        cell: le.cell[..config.geometry.dims()].to_vec(),
        theta: le.theta,
        velocity: le.velocity,
    }
}

fn new_lorentz(config: LorentzConfig, out: *mut *mut TaLorentz) -> Result<(), (TaStatus, String)> {
    config.validate().map_err(engine)?;
    unsafe { *out = Box::into_raw(Box::new(TaLorentz { config })) };
    Ok(())
}

/// Opens a named preset, e.g. `"finite-horizon-square"`.
///
/// # Safety
/// `name` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ta_lorentz_preset(name: *const c_char, out: *mut *mut TaLorentz) -> TaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("output pointer"));
        }
        *out = ptr::null_mut();
        let config = LorentzConfig::preset(read_str(name)?).map_err(engine)?;
        new_lorentz(config, out)
    })
}

/// Opens a table given as JSON.
///
/// # Safety
/// `table_json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ta_lorentz_from_json(table_json: *const c_char, out: *mut *mut TaLorentz) -> TaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("output pointer"));
        }
        *out = ptr::null_mut();
        let config: LorentzConfig = serde_json::from_str(read_str(table_json)?)
            .map_err(|e| (TaStatus::InvalidConfig, e.to_string()))?;
        new_lorentz(config, out)
    })
}

/// Draws a line element from the invariant measure.
///
/// # Safety
/// `table` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ta_lorentz_sample(
    table: *const TaLorentz,
    seed: u64,
    index: u64,
    out: *mut TaLineElement,
) -> TaStatus {
    guard(|| {
        let t = table.as_ref().ok_or_else(|| null("table"))?;
        let o = out.as_mut().ok_or_else(|| null("output pointer"))?;
        *o = flatten(&sample_invariant_measure(seed, index, &t.config));
        Ok(())
    })
}

/// Advances one collision.
///
/// # Safety
/// `table` must be a live handle; `state` and `out` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn ta_lorentz_step(
    table: *const TaLorentz,
    state: *const TaLineElement,
    out: *mut TaCollision,
) -> TaStatus {
    guard(|| {
        let t = table.as_ref().ok_or_else(|| null("table"))?;
        let s = state.as_ref().ok_or_else(|| null("state"))?;
        let o = out.as_mut().ok_or_else(|| null("output pointer"))?;
        if s.scatterer as usize >= t.config.scatterers.len() {
            return Err((TaStatus::InvalidConfig, format!("scatterer {} out of range", s.scatterer)));
        }
        let ev = billiard_step(&unflatten(s, &t.config), &t.config).map_err(engine)?;
        let mut displacement = [0; 2];
        for (d, v) in displacement.iter_mut().zip(&ev.displacement) {
            *d = *v;
        }
        *o = TaCollision { next: flatten(&ev.to), displacement, flight_time: ev.flight_time };
        Ok(())
    })
}

/// # Safety
/// `table` must come from a `ta_lorentz_*` constructor or be null.
#[no_mangle]
pub unsafe extern "C" fn ta_lorentz_free(table: *mut TaLorentz) {
    if !table.is_null() {
        drop(Box::from_raw(table));
    }
}

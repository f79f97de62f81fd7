//! C interface to the emission twin.
//!
//! Every call returns a [`CpmoeStatus`]. On failure, a message is available
//! from [`cpmoe_last_error`] on the same thread until the next call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use cpmoe::dataio::{RawSchema, N_RAW, N_TARGETS, TARGET_NAMES, WINDOW};
use cpmoe::model::Checkpoint;
use cpmoe::server::{NavigateRequest, WhatifRequest};
use cpmoe::twin::{RawWindow, Twin, TwinConfig, TwinError};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CpmoeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Checkpoint = 3,
    Schema = 4,
    BadWindow = 5,
    BadRequest = 6,
    Model = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// Opaque twin handle.
pub struct CpmoeTwin {
    twin: Twin,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: CpmoeStatus, msg: impl Into<String>) -> CpmoeStatus {
    set_error(msg.into());
    status
}

fn twin_status(e: &TwinError) -> CpmoeStatus {
    match e {
        TwinError::SchemaMismatch { .. } => CpmoeStatus::Schema,
        TwinError::WindowShape { .. } | TwinError::NonFinite => CpmoeStatus::BadWindow,
        TwinError::Model(_) | TwinError::Physics(_) => CpmoeStatus::Model,
        _ => CpmoeStatus::BadRequest,
    }
}

fn guard(f: impl FnOnce() -> CpmoeStatus) -> CpmoeStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(CpmoeStatus::Panic, "internal panic"),
    }
}

unsafe fn str_arg<'a>(p: *const c_char) -> Result<&'a str, CpmoeStatus> {
    if p.is_null() {
        return Err(fail(CpmoeStatus::NullPointer, "null string argument"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(CpmoeStatus::InvalidUtf8, "argument is not UTF-8"))
}

unsafe fn twin_ref<'a>(h: *const CpmoeTwin) -> Result<&'a Twin, CpmoeStatus> {
    h.as_ref()
        .map(|t| &t.twin)
        .ok_or_else(|| fail(CpmoeStatus::NullPointer, "null twin handle"))
}

fn emit_json<T: serde::Serialize>(value: &T, out: *mut *mut c_char) -> CpmoeStatus {
    let text = match serde_json::to_string(value) {
        Ok(t) => t,
        Err(e) => return fail(CpmoeStatus::Model, e.to_string()),
    };
    match CString::new(text) {
        Ok(c) => {
            unsafe { *out = c.into_raw() };
            CpmoeStatus::Ok
        }
        Err(e) => fail(CpmoeStatus::Model, e.to_string()),
    }
}

/// Window length in rows expected by [`cpmoe_twin_predict`].
#[no_mangle]
pub extern "C" fn cpmoe_window_len() -> usize {
    WINDOW
}

/// Raw process variables per row.
#[no_mangle]
pub extern "C" fn cpmoe_n_variables() -> usize {
    N_RAW
}

/// Pollutants predicted per window.
#[no_mangle]
pub extern "C" fn cpmoe_n_pollutants() -> usize {
    N_TARGETS
}

/// Last error message on this thread, or null. Owned by the library.
#[no_mangle]
pub extern "C" fn cpmoe_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map(|c| c.as_ptr()).unwrap_or(ptr::null()))
}

/// Opens a checkpoint directory. `schema_path` may be null for the default
/// plant schema.
///
/// # Safety
/// String arguments must be null or NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cpmoe_twin_open(
    ckpt_dir: *const c_char,
    schema_path: *const c_char,
    out: *mut *mut CpmoeTwin,
) -> CpmoeStatus {
    guard(|| {
        if out.is_null() {
            return fail(CpmoeStatus::NullPointer, "null output pointer");
        }
        *out = ptr::null_mut();
        let dir = match str_arg(ckpt_dir) {
            Ok(d) => d,
            Err(s) => return s,
        };
        let schema = if schema_path.is_null() {
            RawSchema::mswi()
        } else {
            let p = match str_arg(schema_path) {
                Ok(p) => p,
                Err(s) => return s,
            };
            match RawSchema::load(Path::new(p)) {
                Ok(s) => s,
                Err(e) => return fail(CpmoeStatus::Schema, e.to_string()),
            }
        };
        let ck = match Checkpoint::load(Path::new(dir)) {
            Ok(c) => c,
            Err(e) => return fail(CpmoeStatus::Checkpoint, e.to_string()),
        };
        match Twin::new(ck, schema, TwinConfig::default()) {
            Ok(twin) => {
                *out = Box::into_raw(Box::new(CpmoeTwin { twin }));
                CpmoeStatus::Ok
            }
            Err(e) => fail(twin_status(&e), e.to_string()),
        }
    })
}

/// Releases a handle from [`cpmoe_twin_open`]. Null is ignored.
///
/// # Safety
/// `twin` must come from [`cpmoe_twin_open`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cpmoe_twin_free(twin: *mut CpmoeTwin) {
    if !twin.is_null() {
        drop(Box::from_raw(twin));
    }
}

/// Predicts pollutant concentrations for a row-major `rows x cols` raw
/// window. Writes `cpmoe_n_pollutants()` values in the order PM, SO2, NOx,
/// HCl, CO, CO2, and the CPSI when `cpsi` is non-null.
///
/// # Safety
/// `window` must hold `rows * cols` doubles; `pollutants` must hold
/// `capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn cpmoe_twin_predict(
    twin: *const CpmoeTwin,
    window: *const f64,
    rows: usize,
    cols: usize,
    pollutants: *mut f64,
    capacity: usize,
    cpsi: *mut f64,
) -> CpmoeStatus {
    guard(|| {
        let t = match twin_ref(twin) {
            Ok(t) => t,
            Err(s) => return s,
        };
        if window.is_null() || pollutants.is_null() {
            return fail(CpmoeStatus::NullPointer, "null buffer");
        }
        if capacity < N_TARGETS {
            return fail(
                CpmoeStatus::BufferTooSmall,
                format!("need {N_TARGETS} slots, got {capacity}"),
            );
        }
        let Some(len) = rows.checked_mul(cols) else {
            return fail(CpmoeStatus::BadWindow, "window size overflows");
        };
        let data = std::slice::from_raw_parts(window, len);
        let w = RawWindow {
            rows: data.chunks(cols.max(1)).map(|r| r.to_vec()).collect(),
            start: None,
        };
        match t.predict(&w) {
            Ok(p) => {
                for (i, name) in TARGET_NAMES.iter().enumerate() {
                    *pollutants.add(i) = p.pollutants[*name];
                }
                if !cpsi.is_null() {
                    *cpsi = p.cpsi;
                }
                CpmoeStatus::Ok
            }
            Err(e) => fail(twin_status(&e), e.to_string()),
        }
    })
}

/// Evaluates a what-if request given as JSON
/// (`{"window": [[...]], "action": {"var": delta}}`) and returns the
/// scenario as JSON. Free the result with [`cpmoe_string_free`].
///
/// # Safety
/// `request` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cpmoe_twin_whatif_json(
    twin: *const CpmoeTwin,
    request: *const c_char,
    out: *mut *mut c_char,
) -> CpmoeStatus {
    guard(|| {
        if out.is_null() {
            return fail(CpmoeStatus::NullPointer, "null output pointer");
        }
        *out = ptr::null_mut();
        let (t, body) = match (twin_ref(twin), str_arg(request)) {
            (Ok(t), Ok(b)) => (t, b),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        let req: WhatifRequest = match serde_json::from_str(body) {
            Ok(r) => r,
            Err(e) => return fail(CpmoeStatus::BadRequest, e.to_string()),
        };
        let w = RawWindow {
            rows: req.window,
            start: req.start,
        };
        match t.whatif(&w, &req.action) {
            Ok(s) => emit_json(&s, out),
            Err(e) => fail(twin_status(&e), e.to_string()),
        }
    })
}

/// Ranks control adjustments for a JSON navigate request
/// (`{"window": [[...]], "modules": [...], "top_n": 5}`). Free the result
/// with [`cpmoe_string_free`].
///
/// # Safety
/// `request` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cpmoe_twin_navigate_json(
    twin: *const CpmoeTwin,
    request: *const c_char,
    out: *mut *mut c_char,
) -> CpmoeStatus {
    guard(|| {
        if out.is_null() {
            return fail(CpmoeStatus::NullPointer, "null output pointer");
        }
        *out = ptr::null_mut();
        let (t, body) = match (twin_ref(twin), str_arg(request)) {
            (Ok(t), Ok(b)) => (t, b),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        let req: NavigateRequest = match serde_json::from_str(body) {
            Ok(r) => r,
            Err(e) => return fail(CpmoeStatus::BadRequest, e.to_string()),
        };
        let w = RawWindow {
            rows: req.window,
            start: req.start,
        };
        match t.navigate(&w, &req.modules, req.top_n) {
            Ok(r) => emit_json(&r, out),
            Err(e) => fail(twin_status(&e), e.to_string()),
        }
    })
}

/// Frees a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn cpmoe_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

//! C ABI for `apverify`.
//!
//! Objects cross the boundary as opaque handles owned by the caller and
//! released with the matching `_free` function. Every fallible call returns an
//! [`ApvStatus`]; on failure a message is available from
//! [`apv_last_error_message`] on the same thread. Panics never unwind into C.

// `!(x < y)` is used on purpose so NaN lands in the error branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use apverify::experiment::{ExperimentConfig, RunError};
use apverify::model::{self, CounterexampleParams, DensityVariant};
use apverify::path::{self, GridSpec, Outcome, PathBundle, StopTime};

/// Result of a call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApvStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Numerical = 5,
    Panic = 6,
}

/// Density variant selector.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApvVariant {
    Literal = 0,
    Corrected = 1,
}

/// Path termination.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApvOutcome {
    Hit = 0,
    Jump = 1,
    Censored = 2,
}

/// Opaque validated model parameters.
pub struct ApvParams(CounterexampleParams);

/// Opaque simulated path ensemble.
pub struct ApvBundle(PathBundle);

/// Plain copy of the parameter record.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct ApvParamValues {
    pub a: f64,
    pub p: f64,
    pub q: f64,
    pub b: f64,
    pub delta: f64,
    pub gamma: f64,
    pub level: f64,
    /// 0 literal, 1 corrected.
    pub variant: c_int,
}

/// Terminal data of one path. Times that did not occur are NaN.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct ApvPathSummary {
    pub path_id: u64,
    pub outcome: ApvOutcome,
    pub t1: f64,
    pub t2: f64,
    pub t_final: f64,
    pub s_final: f64,
    pub b_final: f64,
    pub compensator_final: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn fail(status: ApvStatus, msg: impl Into<String>) -> ApvStatus {
    set_error(msg);
    status
}

/// Runs `f`, converting panics into [`ApvStatus::Panic`].
fn guard(f: impl FnOnce() -> ApvStatus) -> ApvStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            fail(ApvStatus::Panic, msg)
        }
    }
}

fn run_error_status(e: &RunError) -> ApvStatus {
    match e {
        RunError::Config { .. } => ApvStatus::Config,
        RunError::Io { .. } => ApvStatus::Io,
        RunError::Numerical(_) => ApvStatus::Numerical,
    }
}

/// Message of the last failed call on this thread, or NULL. The pointer is
/// valid until the next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn apv_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Validates parameters. Pass `b = NaN` to search for a feasible `b`;
/// `variant` is an [`ApvVariant`] value.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for a handle.
#[no_mangle]
pub unsafe extern "C" fn apv_params_new(
    a: f64,
    p: f64,
    b: f64,
    variant: c_int,
    out: *mut *mut ApvParams,
) -> ApvStatus {
    guard(|| {
        if out.is_null() {
            return fail(ApvStatus::NullPointer, "out is NULL");
        }
        let variant = match variant {
            v if v == ApvVariant::Literal as c_int => DensityVariant::Literal,
            v if v == ApvVariant::Corrected as c_int => DensityVariant::Corrected,
            other => {
                return fail(
                    ApvStatus::InvalidArgument,
                    format!("unknown variant {other}"),
                )
            }
        };
        let b = if b.is_nan() { None } else { Some(b) };
        match model::select_counterexample_params(a, p, b, variant) {
            Ok(params) => {
                *out = Box::into_raw(Box::new(ApvParams(params)));
                ApvStatus::Ok
            }
            Err(e) => fail(ApvStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Releases a parameter handle; NULL is ignored.
///
/// # Safety
/// `h` must come from [`apv_params_new`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn apv_params_free(h: *mut ApvParams) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// # Safety
/// `h` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn apv_params_get(
    h: *const ApvParams,
    out: *mut ApvParamValues,
) -> ApvStatus {
    guard(|| {
        if h.is_null() || out.is_null() {
            return fail(ApvStatus::NullPointer, "handle or out is NULL");
        }
        let p = &(*h).0;
        *out = ApvParamValues {
            a: p.a(),
            p: p.p(),
            q: p.q(),
            b: p.b(),
            delta: p.delta(),
            gamma: p.gamma(),
            level: p.level(),
            variant: match p.variant() {
                DensityVariant::Literal => 0,
                DensityVariant::Corrected => 1,
            },
        };
        ApvStatus::Ok
    })
}

/// Serializes parameters to JSON. Free the string with [`apv_string_free`].
///
/// # Safety
/// `h` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn apv_params_to_json(
    h: *const ApvParams,
    out: *mut *mut c_char,
) -> ApvStatus {
    guard(|| {
        if h.is_null() || out.is_null() {
            return fail(ApvStatus::NullPointer, "handle or out is NULL");
        }
        match serde_json::to_string(&(*h).0) {
            Ok(s) => match CString::new(s) {
                Ok(c) => {
                    *out = c.into_raw();
                    ApvStatus::Ok
                }
                Err(e) => fail(ApvStatus::Numerical, e.to_string()),
            },
            Err(e) => fail(ApvStatus::Numerical, e.to_string()),
        }
    })
}

/// Releases a string returned by this library; NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn apv_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Jump intensity at price `s`.
///
/// # Safety
/// `h` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn apv_intensity(
    h: *const ApvParams,
    s: f64,
    post_hit: bool,
    out: *mut f64,
) -> ApvStatus {
    guard(|| {
        if h.is_null() || out.is_null() {
            return fail(ApvStatus::NullPointer, "handle or out is NULL");
        }
        match model::intensity(s, &(*h).0, post_hit) {
            Ok(v) => {
                *out = v;
                ApvStatus::Ok
            }
            Err(e) => fail(ApvStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// `1 + b/(1-a)`; requires `0 < a < 1` and `b >= a`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn apv_p_prime(a: f64, b: f64, out: *mut f64) -> ApvStatus {
    guard(|| {
        if out.is_null() {
            return fail(ApvStatus::NullPointer, "out is NULL");
        }
        if !(a > 0.0 && a < 1.0) || !(b >= a) {
            return fail(
                ApvStatus::InvalidArgument,
                format!("requires 0 < a < 1 and b >= a, got a = {a}, b = {b}"),
            );
        }
        *out = model::p_prime(a, b);
        ApvStatus::Ok
    })
}

/// Simulates `n_paths` paths under `Q` on the default grid. `t_max = NaN`
/// uses the default horizon.
///
/// # Safety
/// `h` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn apv_simulate(
    h: *const ApvParams,
    n_paths: u64,
    seed: u64,
    t_max: f64,
    out: *mut *mut ApvBundle,
) -> ApvStatus {
    guard(|| {
        if h.is_null() || out.is_null() {
            return fail(ApvStatus::NullPointer, "handle or out is NULL");
        }
        let params = &(*h).0;
        let mut grid = GridSpec::for_params(params);
        if !t_max.is_nan() {
            grid.t_max = t_max;
        }
        match path::simulate_paths(params, &grid, n_paths as usize, seed) {
            Ok(b) => {
                *out = Box::into_raw(Box::new(ApvBundle(b)));
                ApvStatus::Ok
            }
            Err(e) => fail(ApvStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Number of paths in a bundle (0 for NULL).
///
/// # Safety
/// `h` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn apv_bundle_len(h: *const ApvBundle) -> u64 {
    if h.is_null() {
        0
    } else {
        (*h).0.summaries.len() as u64
    }
}

/// Fraction of paths unresolved at the horizon (NaN for NULL).
///
/// # Safety
/// `h` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn apv_bundle_censored_mass(h: *const ApvBundle) -> f64 {
    if h.is_null() {
        f64::NAN
    } else {
        (*h).0.censored_mass
    }
}

/// # Safety
/// `h` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn apv_bundle_path(
    h: *const ApvBundle,
    index: u64,
    out: *mut ApvPathSummary,
) -> ApvStatus {
    guard(|| {
        if h.is_null() || out.is_null() {
            return fail(ApvStatus::NullPointer, "handle or out is NULL");
        }
        let bundle = &(*h).0;
        let Some(s) = bundle.summaries.get(index as usize) else {
            return fail(
                ApvStatus::InvalidArgument,
                format!("index {index} out of range"),
            );
        };
        let time = |t: StopTime| t.time().unwrap_or(f64::NAN);
        *out = ApvPathSummary {
            path_id: s.path_id,
            outcome: match s.outcome() {
                Outcome::Hit => ApvOutcome::Hit,
                Outcome::Jump => ApvOutcome::Jump,
                Outcome::Censored => ApvOutcome::Censored,
            },
            t1: time(s.t1),
            t2: time(s.t2),
            t_final: time(s.t_final),
            s_final: s.s_final,
            b_final: s.b_final,
            compensator_final: s.compensator_final,
        };
        ApvStatus::Ok
    })
}

/// Releases a bundle; NULL is ignored.
///
/// # Safety
/// `h` must come from [`apv_simulate`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn apv_bundle_free(h: *mut ApvBundle) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Runs an experiment described by a JSON configuration and writes its
/// reports. On `Ok`, `exit_code` receives 0 (all checks passed) or 1 (a
/// gating check was violated).
///
/// # Safety
/// `config_json` must be a NUL-terminated UTF-8 string; `exit_code` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn apv_run_experiment(
    config_json: *const c_char,
    exit_code: *mut c_int,
) -> ApvStatus {
    guard(|| {
        if config_json.is_null() || exit_code.is_null() {
            return fail(ApvStatus::NullPointer, "config or exit_code is NULL");
        }
        let text = match CStr::from_ptr(config_json).to_str() {
            Ok(t) => t,
            Err(e) => return fail(ApvStatus::InvalidArgument, e.to_string()),
        };
        let result = ExperimentConfig::from_json(text).and_then(|c| apverify::run_experiment(&c));
        match result {
            Ok(m) => {
                *exit_code = m.exit_code;
                ApvStatus::Ok
            }
            Err(e) => {
                *exit_code = e.exit_code();
                fail(run_error_status(&e), e.to_string())
            }
        }
    })
}

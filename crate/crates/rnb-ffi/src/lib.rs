//! C ABI over the scene runner and gradient checker. All handles are opaque;
//! every call returns a status code and the last failure message is
//! retrievable per thread.

use rnb::harness::{self, load_scene, run_experiment, HarnessError};
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

/// Status codes mirroring the CLI exit-code contract.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RnbStatus {
    Ok = 0,
    /// null pointer, invalid UTF-8, or an internal panic
    InvalidArgument = 1,
    /// scene parse or validation failure
    Validation = 2,
    /// non-finite gradient
    Numerical = 3,
    Io = 4,
}

/// Opaque loaded-and-validated scene handle.
pub struct RnbScene {
    inner: harness::SceneFile,
}

/// Result block filled by `rnb_gradcheck`.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct RnbGradCheckResult {
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    pub compared: u64,
    pub skipped_nonsmooth: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(err: &HarnessError) -> RnbStatus {
    match err.exit_code() {
        2 => RnbStatus::Validation,
        3 => RnbStatus::Numerical,
        4 => RnbStatus::Io,
        _ => RnbStatus::InvalidArgument,
    }
}

/// # Safety
/// `s` must be a valid NUL-terminated string or null.
unsafe fn opt_str<'a>(s: *const c_char) -> Result<Option<&'a str>, RnbStatus> {
    if s.is_null() {
        return Ok(None);
    }
    CStr::from_ptr(s).to_str().map(Some).map_err(|_| {
        set_error("string argument is not valid UTF-8");
        RnbStatus::InvalidArgument
    })
}

fn guarded(f: impl FnOnce() -> RnbStatus) -> RnbStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => {
            set_error("internal panic");
            RnbStatus::InvalidArgument
        }
    }
}

/// Message describing the most recent failure on this thread. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn rnb_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads and validates a scene JSON file. On success writes a handle the
/// caller must release with `rnb_scene_free`.
///
/// # Safety
/// `path` must be a valid NUL-terminated string; `out_scene` must be a valid
/// pointer.
#[no_mangle]
pub unsafe extern "C" fn rnb_scene_load(
    path: *const c_char,
    out_scene: *mut *mut RnbScene,
) -> RnbStatus {
    guarded(|| {
        if out_scene.is_null() {
            set_error("out_scene is null");
            return RnbStatus::InvalidArgument;
        }
        *out_scene = ptr::null_mut();
        let Some(path) = (match opt_str(path) {
            Ok(p) => p,
            Err(s) => return s,
        }) else {
            set_error("path is null");
            return RnbStatus::InvalidArgument;
        };
        match load_scene(Path::new(path)) {
            Ok(scene) => {
                *out_scene = Box::into_raw(Box::new(RnbScene { inner: scene }));
                RnbStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Releases a scene handle. Null is ignored.
///
/// # Safety
/// `scene` must be a handle from `rnb_scene_load` not yet freed, or null.
#[no_mangle]
pub unsafe extern "C" fn rnb_scene_free(scene: *mut RnbScene) {
    if !scene.is_null() {
        drop(Box::from_raw(scene));
    }
}

/// Number of concepts in a loaded scene; 0 for a null handle.
///
/// # Safety
/// `scene` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn rnb_scene_concept_count(scene: *const RnbScene) -> u64 {
    if scene.is_null() {
        return 0;
    }
    (*scene).inner.concepts.len() as u64
}

/// Runs one experiment, writing metrics.csv / report.json (and map dumps when
/// `dump_maps`) under `out_dir`. `ablate` is an optional comma-separated flag
/// list (may be null). On success writes the final mIoU to `out_final_miou`
/// when non-null.
///
/// # Safety
/// `scene` must be a live handle; `out_dir` a valid NUL-terminated string;
/// `ablate` a valid string or null; `out_final_miou` a valid pointer or null.
#[no_mangle]
pub unsafe extern "C" fn rnb_run_experiment(
    scene: *const RnbScene,
    out_dir: *const c_char,
    dump_maps: bool,
    ablate: *const c_char,
    out_final_miou: *mut f64,
) -> RnbStatus {
    guarded(|| {
        if scene.is_null() {
            set_error("scene is null");
            return RnbStatus::InvalidArgument;
        }
        let Some(out_dir) = (match opt_str(out_dir) {
            Ok(p) => p,
            Err(s) => return s,
        }) else {
            set_error("out_dir is null");
            return RnbStatus::InvalidArgument;
        };
        let ablations: Vec<String> = match opt_str(ablate) {
            Ok(Some(s)) if !s.is_empty() => s.split(',').map(str::to_string).collect(),
            Ok(_) => Vec::new(),
            Err(s) => return s,
        };
        match run_experiment(&(*scene).inner, Path::new(out_dir), dump_maps, &ablations) {
            Ok(report) => {
                if !out_final_miou.is_null() {
                    *out_final_miou = report.summary.final_miou;
                }
                RnbStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Finite-difference checks the full guidance energy on a seeded random
/// scene and fills `out`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rnb_gradcheck(
    seed: u64,
    probes: u64,
    out: *mut RnbGradCheckResult,
) -> RnbStatus {
    guarded(|| {
        if out.is_null() {
            set_error("out is null");
            return RnbStatus::InvalidArgument;
        }
        let r = harness::gradcheck_scene(seed, probes as usize);
        *out = RnbGradCheckResult {
            max_abs_error: r.max_abs_error,
            max_rel_error: r.max_rel_error,
            compared: r.num_compared as u64,
            skipped_nonsmooth: r.num_skipped_nonsmooth as u64,
        };
        RnbStatus::Ok
    })
}

//! C ABI over the portool experiment harness.
//!
//! Conventions: handles are opaque pointers owned by this library and
//! released with their matching `_free` function; fallible calls return a
//! [`PortoolStatus`] and leave a message for [`portool_last_error`]; strings
//! cross the boundary as NUL-terminated UTF-8.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;

use portool::harness::{dump_tree, run_eval, run_train, ExperimentConfig, MetricRecord};

/// Status code of every fallible FFI call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PortoolStatus {
    Ok = 0,
    /// A required pointer argument was NULL.
    NullPointer = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// The configuration failed to parse or validate.
    InvalidArgument = 3,
    /// Training, evaluation or dumping failed; see `portool_last_error`.
    RunFailed = 4,
}

/// Final-round evaluation metrics of a run.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct PortoolMetrics {
    /// Training rounds completed (0 for a bare evaluation).
    pub rounds: usize,
    pub mean_outcome: f64,
    pub accuracy: f64,
    pub mean_steps: f64,
    pub unanswerable_rate: f64,
    /// Mean raw formatting rubric value in [0, 1].
    pub mean_fm: f64,
}

/// Opaque experiment configuration handle.
pub struct PortoolConfig {
    inner: ExperimentConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn fail(status: PortoolStatus, msg: &str) -> PortoolStatus {
    let owned = CString::new(msg.replace('\0', " ")).expect("NUL stripped");
    LAST_ERROR.with(|e| *e.borrow_mut() = owned);
    status
}

/// Last error message of this thread, empty until a call fails. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn portool_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string; never freed.
#[no_mangle]
pub extern "C" fn portool_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// # Safety
/// `s` must be NULL or a pointer to a NUL-terminated string that lives for
/// the duration of the call.
unsafe fn utf8_arg<'a>(s: *const c_char, what: &str) -> Result<&'a str, PortoolStatus> {
    if s.is_null() {
        return Err(fail(PortoolStatus::NullPointer, &format!("{what} is NULL")));
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|_| fail(PortoolStatus::InvalidUtf8, &format!("{what} is not UTF-8")))
}

/// New configuration handle with the library defaults. Never fails; release
/// with `portool_config_free`.
#[no_mangle]
pub extern "C" fn portool_config_new() -> *mut PortoolConfig {
    Box::into_raw(Box::new(PortoolConfig { inner: ExperimentConfig::default() }))
}

/// Parses a TOML document into a validated configuration handle; keys missing
/// from the document keep their defaults.
///
/// # Safety
/// `text` must point to a NUL-terminated string and `out` to writable
/// pointer storage; both must stay valid for the duration of the call.
#[no_mangle]
pub unsafe extern "C" fn portool_config_from_toml(
    text: *const c_char,
    out: *mut *mut PortoolConfig,
) -> PortoolStatus {
    if out.is_null() {
        return fail(PortoolStatus::NullPointer, "out is NULL");
    }
    let text = match utf8_arg(text, "text") {
        Ok(t) => t,
        Err(status) => return status,
    };
    let inner: ExperimentConfig = match toml::from_str(text) {
        Ok(cfg) => cfg,
        Err(e) => return fail(PortoolStatus::InvalidArgument, &format!("bad config: {e}")),
    };
    if let Err(e) = inner.validate() {
        return fail(PortoolStatus::InvalidArgument, &e.to_string());
    }
    *out = Box::into_raw(Box::new(PortoolConfig { inner }));
    PortoolStatus::Ok
}

/// Serializes a configuration to TOML. The returned string is owned by the
/// caller and must be released with `portool_string_free`.
///
/// # Safety
/// `cfg` must be a live handle from this library and `out` writable pointer
/// storage.
#[no_mangle]
pub unsafe extern "C" fn portool_config_to_toml(
    cfg: *const PortoolConfig,
    out: *mut *mut c_char,
) -> PortoolStatus {
    if cfg.is_null() || out.is_null() {
        return fail(PortoolStatus::NullPointer, "cfg or out is NULL");
    }
    let text = match toml::to_string_pretty(&(*cfg).inner) {
        Ok(t) => t,
        Err(e) => return fail(PortoolStatus::RunFailed, &format!("serialize: {e}")),
    };
    *out = CString::new(text).expect("TOML has no NUL").into_raw();
    PortoolStatus::Ok
}

/// Releases a configuration handle. NULL is a no-op.
///
/// # Safety
/// `cfg` must be NULL or an unreleased handle returned by this library.
#[no_mangle]
pub unsafe extern "C" fn portool_config_free(cfg: *mut PortoolConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Releases a string returned by this library. NULL is a no-op.
///
/// # Safety
/// `s` must be NULL or an unreleased string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn portool_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

fn metrics_from(rec: &MetricRecord, rounds: usize) -> PortoolMetrics {
    PortoolMetrics {
        rounds,
        mean_outcome: rec.mean_outcome,
        accuracy: rec.accuracy,
        mean_steps: rec.mean_steps,
        unanswerable_rate: rec.unanswerable_rate,
        mean_fm: rec.mean_fm,
    }
}

/// Trains a policy, writing config snapshot, metrics CSV and checkpoint into
/// `out_dir`. On success fills `out_metrics` (may be NULL) with the final
/// round's evaluation.
///
/// # Safety
/// `cfg` must be a live handle, `out_dir` a NUL-terminated path, and
/// `out_metrics` NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn portool_train(
    cfg: *const PortoolConfig,
    out_dir: *const c_char,
    out_metrics: *mut PortoolMetrics,
) -> PortoolStatus {
    if cfg.is_null() {
        return fail(PortoolStatus::NullPointer, "cfg is NULL");
    }
    let out_dir = match utf8_arg(out_dir, "out_dir") {
        Ok(d) => d,
        Err(status) => return status,
    };
    match run_train(&(*cfg).inner, Path::new(out_dir)) {
        Ok(state) => {
            if !out_metrics.is_null() {
                let last = state.metric_history.last().expect("rounds >= 1");
                *out_metrics = metrics_from(last, state.round);
            }
            PortoolStatus::Ok
        }
        Err(e) => fail(PortoolStatus::RunFailed, &e.to_string()),
    }
}

/// Evaluates a saved checkpoint on the configuration's eval split.
///
/// # Safety
/// `cfg` must be a live handle, `params_path` a NUL-terminated path, and
/// `out_metrics` writable.
#[no_mangle]
pub unsafe extern "C" fn portool_eval(
    cfg: *const PortoolConfig,
    params_path: *const c_char,
    out_metrics: *mut PortoolMetrics,
) -> PortoolStatus {
    if cfg.is_null() || out_metrics.is_null() {
        return fail(PortoolStatus::NullPointer, "cfg or out_metrics is NULL");
    }
    let params_path = match utf8_arg(params_path, "params_path") {
        Ok(p) => p,
        Err(status) => return status,
    };
    match run_eval(&(*cfg).inner, Path::new(params_path)) {
        Ok(rec) => {
            *out_metrics = metrics_from(&rec, 0);
            PortoolStatus::Ok
        }
        Err(e) => fail(PortoolStatus::RunFailed, &e.to_string()),
    }
}

/// Rolls out one trajectory tree and writes tree/reward/advantage JSONL
/// artifacts into `out_dir`. `template_id` NULL picks the default template;
/// `params_path` NULL uses the configured initial policy.
///
/// # Safety
/// `cfg` must be a live handle; `template_id` and `params_path` NULL or
/// NUL-terminated; `out_dir` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn portool_dump_tree(
    cfg: *const PortoolConfig,
    template_id: *const c_char,
    params_path: *const c_char,
    out_dir: *const c_char,
) -> PortoolStatus {
    if cfg.is_null() {
        return fail(PortoolStatus::NullPointer, "cfg is NULL");
    }
    let out_dir = match utf8_arg(out_dir, "out_dir") {
        Ok(d) => d,
        Err(status) => return status,
    };
    let template = if template_id.is_null() {
        None
    } else {
        match utf8_arg(template_id, "template_id") {
            Ok(t) => Some(t),
            Err(status) => return status,
        }
    };
    let params = if params_path.is_null() {
        None
    } else {
        match utf8_arg(params_path, "params_path") {
            Ok(p) => Some(p),
            Err(status) => return status,
        }
    };
    match dump_tree(&(*cfg).inner, template, params.map(Path::new), Path::new(out_dir)) {
        Ok(_) => PortoolStatus::Ok,
        Err(e) => fail(PortoolStatus::RunFailed, &e.to_string()),
    }
}

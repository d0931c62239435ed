//! C ABI over the screening pipeline.
//!
//! The header is generated into `include/brains.h` at build time.
//!
//! Conventions:
//! - Every fallible call returns a [`BrainsStatus`]. On failure,
//!   [`brains_last_error_message`] holds a JSON error body
//!   (`{"error": ..., "message": ...}`) for the calling thread.
//! - Strings returned through `out_json` are owned by the caller and must be
//!   released with [`brains_string_free`].
//! - A [`BrainsModel`] handle may be shared across threads for reading; free
//!   it exactly once with [`brains_model_free`].
//! - Panics never cross the boundary; they surface as `BRAINS_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use brains::config::BackendChoice;
use brains::screen::{case_schema, parse_screen_request, screen, similar, Artifacts, ErrorCode, ScreenError};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BrainsStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidJson = 3,
    ValidationFailed = 4,
    BadRequest = 5,
    UnknownCase = 6,
    IoFailure = 7,
    CorruptArtifact = 8,
    VersionMismatch = 9,
    Internal = 10,
    Panic = 11,
}

/// Opaque handle to a loaded checkpoint and case base.
pub struct BrainsModel {
    artifacts: Artifacts,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(body: serde_json::Value) {
    let c = CString::new(body.to_string()).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

struct Fail(BrainsStatus, serde_json::Value);

impl Fail {
    fn new(status: BrainsStatus, code: ErrorCode, message: impl Into<String>) -> Self {
        Fail(status, serde_json::json!({ "error": code.as_str(), "message": message.into() }))
    }
}

impl From<ScreenError> for Fail {
    fn from(e: ScreenError) -> Self {
        let status = match e.code() {
            ErrorCode::ValidationFailed => BrainsStatus::ValidationFailed,
            ErrorCode::BadRequest => BrainsStatus::BadRequest,
            ErrorCode::UnknownCase => BrainsStatus::UnknownCase,
            ErrorCode::IoFailure => BrainsStatus::IoFailure,
            ErrorCode::CorruptArtifact => BrainsStatus::CorruptArtifact,
            ErrorCode::VersionMismatch => BrainsStatus::VersionMismatch,
            _ => BrainsStatus::Internal,
        };
        Fail(status, e.to_json())
    }
}

/// Run `f`, converting failures and panics into a status plus last-error.
fn guarded(f: impl FnOnce() -> Result<(), Fail>) -> BrainsStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => BrainsStatus::Ok,
        Ok(Err(Fail(status, body))) => {
            set_error(body);
            status
        }
        Err(_) => {
            set_error(serde_json::json!({ "error": ErrorCode::Internal.as_str(), "message": "panic inside brains" }));
            BrainsStatus::Panic
        }
    }
}

/// # Safety
/// `p` is null or a NUL-terminated string.
unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::new(BrainsStatus::NullArgument, ErrorCode::BadRequest, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::new(BrainsStatus::InvalidUtf8, ErrorCode::BadRequest, format!("{name} is not UTF-8")))
}

/// # Safety
/// `out` is null or writable.
unsafe fn put_string(out: *mut *mut c_char, s: String) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail::new(BrainsStatus::NullArgument, ErrorCode::BadRequest, "out_json is null"));
    }
    let c = CString::new(s).map_err(|_| Fail::new(BrainsStatus::Internal, ErrorCode::Internal, "interior NUL"))?;
    *out = c.into_raw();
    Ok(())
}

/// # Safety
/// `model` is null or a live handle from [`brains_model_load`].
unsafe fn model_arg<'a>(model: *const BrainsModel) -> Result<&'a BrainsModel, Fail> {
    model
        .as_ref()
        .ok_or_else(|| Fail::new(BrainsStatus::NullArgument, ErrorCode::BadRequest, "model is null"))
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn brains_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// JSON error body of the last failed call on this thread, or null. Valid
/// until the next `brains_*` call on the same thread.
#[no_mangle]
pub extern "C" fn brains_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Load a checkpoint, index and JSONL corpus into a new handle.
///
/// # Safety
/// Path arguments are NUL-terminated strings; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn brains_model_load(
    checkpoint_path: *const c_char,
    index_path: *const c_char,
    corpus_path: *const c_char,
    out: *mut *mut BrainsModel,
) -> BrainsStatus {
    guarded(|| {
        if out.is_null() {
            return Err(Fail::new(BrainsStatus::NullArgument, ErrorCode::BadRequest, "out is null"));
        }
        *out = ptr::null_mut();
        let ck = str_arg(checkpoint_path, "checkpoint_path")?;
        let ix = str_arg(index_path, "index_path")?;
        let co = str_arg(corpus_path, "corpus_path")?;
        let artifacts = Artifacts::load(Path::new(ck), Path::new(ix), Path::new(co))?;
        *out = Box::into_raw(Box::new(BrainsModel { artifacts }));
        Ok(())
    })
}

/// Release a handle. Null is ignored.
///
/// # Safety
/// `model` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn brains_model_free(model: *mut BrainsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of indexed cases, or 0 for a null handle.
///
/// # Safety
/// `model` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn brains_model_index_size(model: *const BrainsModel) -> usize {
    model.as_ref().map_or(0, |m| m.artifacts.base.len())
}

/// Screen one case with the local backend. `request_json` is a case object,
/// optionally with `"k"`. On success `*out_json` receives the report.
///
/// # Safety
/// `model` is a live handle; `request_json` is NUL-terminated; `out_json` is writable.
#[no_mangle]
pub unsafe extern "C" fn brains_screen_json(
    model: *const BrainsModel,
    request_json: *const c_char,
    out_json: *mut *mut c_char,
) -> BrainsStatus {
    guarded(|| {
        let m = model_arg(model)?;
        let text = str_arg(request_json, "request_json")?;
        let body: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| Fail::new(BrainsStatus::InvalidJson, ErrorCode::PayloadUnparseable, e.to_string()))?;
        let mut req = parse_screen_request(body)?;
        // the remote backend is not reachable through this interface
        req.backend = Some(BackendChoice::Local);
        let out = screen(&m.artifacts, &req, BackendChoice::Local, None)?;
        put_string(out_json, serde_json::to_string(&out).expect("report serializes"))
    })
}

/// Nearest indexed cases to the indexed case `id`.
///
/// # Safety
/// `model` is a live handle; `id` is NUL-terminated; `out_json` is writable.
#[no_mangle]
pub unsafe extern "C" fn brains_similar_json(
    model: *const BrainsModel,
    id: *const c_char,
    k: usize,
    out_json: *mut *mut c_char,
) -> BrainsStatus {
    guarded(|| {
        let m = model_arg(model)?;
        let id = str_arg(id, "id")?;
        let out = similar(&m.artifacts, id, k)?;
        put_string(out_json, serde_json::to_string(&out).expect("response serializes"))
    })
}

/// Case field schema as JSON.
///
/// # Safety
/// `out_json` is writable.
#[no_mangle]
pub unsafe extern "C" fn brains_schema_json(out_json: *mut *mut c_char) -> BrainsStatus {
    guarded(|| put_string(out_json, case_schema().to_string()))
}

/// Release a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` is null or came from a `brains_*` out parameter and was not freed.
#[no_mangle]
pub unsafe extern "C" fn brains_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

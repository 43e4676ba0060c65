//! C interface: load a checkpoint, generate CSV text, free what was
//! allocated here.
//!
//! Every fallible call returns an [`OctganStatus`]. On failure the message
//! is kept per thread and read with [`octgan_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use octgan::model::OctGan;
use octgan::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OctganStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    MissingFile = 3,
    Checkpoint = 4,
    InvalidArgument = 5,
    Io = 6,
    Panic = 7,
    Other = 8,
}

/// Opaque model handle.
pub struct OctganModel {
    inner: OctGan,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> OctganStatus {
    match e {
        Error::MissingFile(_) => OctganStatus::MissingFile,
        Error::Checkpoint(_) | Error::Json(_) => OctganStatus::Checkpoint,
        Error::InvalidArgument(_) | Error::Config(_) => OctganStatus::InvalidArgument,
        Error::Io(_) => OctganStatus::Io,
        _ => OctganStatus::Other,
    }
}

fn guard(f: impl FnOnce() -> Result<(), OctganStatus>) -> OctganStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => OctganStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => {
            set_error("panic inside octgan".into());
            OctganStatus::Panic
        }
    }
}

fn fail(e: Error) -> OctganStatus {
    let s = status_of(&e);
    set_error(e.to_string());
    s
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, OctganStatus> {
    if p.is_null() {
        set_error(format!("{what} is null"));
        return Err(OctganStatus::NullPointer);
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        set_error(format!("{what} is not valid UTF-8"));
        OctganStatus::InvalidUtf8
    })
}

fn null_out(what: &str) -> OctganStatus {
    set_error(format!("{what} is null"));
    OctganStatus::NullPointer
}

/// Loads a checkpoint file into `*out`.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn octgan_model_load(path: *const c_char, out: *mut *mut OctganModel) -> OctganStatus {
    guard(|| {
        if out.is_null() {
            return Err(null_out("out"));
        }
        *out = ptr::null_mut();
        let path = str_arg(path, "path")?;
        let inner = OctGan::load(Path::new(path)).map_err(fail)?;
        *out = Box::into_raw(Box::new(OctganModel { inner }));
        Ok(())
    })
}

/// Builds a model from checkpoint JSON text.
///
/// # Safety
/// `json` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn octgan_model_from_json(json: *const c_char, out: *mut *mut OctganModel) -> OctganStatus {
    guard(|| {
        if out.is_null() {
            return Err(null_out("out"));
        }
        *out = ptr::null_mut();
        let json = str_arg(json, "json")?;
        let inner = OctGan::from_json(json).map_err(fail)?;
        *out = Box::into_raw(Box::new(OctganModel { inner }));
        Ok(())
    })
}

/// Generates `rows` rows for `seed` and stores comma-separated text with a
/// header line in `*out`. Release it with [`octgan_string_free`].
///
/// # Safety
/// `model` must come from this library and `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn octgan_model_generate_csv(
    model: *const OctganModel,
    rows: usize,
    seed: u64,
    out: *mut *mut c_char,
) -> OctganStatus {
    guard(|| {
        if out.is_null() {
            return Err(null_out("out"));
        }
        *out = ptr::null_mut();
        let model = model.as_ref().ok_or_else(|| null_out("model"))?;
        let table = model.inner.generate(rows, seed).map_err(fail)?;
        let text = table.to_csv_string(b',').map_err(fail)?;
        *out = CString::new(text).map_err(|_| fail(Error::InvalidArgument("nul byte in output".into())))?.into_raw();
        Ok(())
    })
}

/// Number of columns in generated tables, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn octgan_model_columns(model: *const OctganModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.transformer.schema.columns.len())
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must be null or come from this library, and not be used again.
#[no_mangle]
pub unsafe extern "C" fn octgan_model_free(model: *mut OctganModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must be null or come from this library, and not be used again.
#[no_mangle]
pub unsafe extern "C" fn octgan_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Message of the last failed call on this thread, or null. Valid until
/// the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn octgan_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

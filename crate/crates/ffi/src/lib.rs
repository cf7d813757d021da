//! C ABI over the replay buffer and the pretraining loop.
//!
//! Every entry point returns a [`TmrStatus`]. On failure a message is kept per
//! thread and can be read with [`tmr_last_error`]. Panics never cross the
//! boundary; they come back as `TMR_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use tmr::Error;

mod buffer;
mod trainer;

pub use buffer::*;
pub use trainer::*;

#[repr(C)]
#[allow(non_camel_case_types)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TmrStatus {
    TMR_OK = 0,
    TMR_NULL = 1,
    TMR_INVALID_ARGUMENT = 2,
    TMR_INDEX = 3,
    TMR_STALE_ENTRY = 4,
    TMR_NOT_READY = 5,
    TMR_CONFIG = 6,
    TMR_IO = 7,
    TMR_NUMERICAL = 8,
    TMR_PANIC = 9,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

/// Message for the last failed call on this thread, or null.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn tmr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

#[no_mangle]
pub extern "C" fn tmr_clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

pub(crate) enum Fail {
    Null(&'static str),
    Arg(String),
    Core(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

fn status_of(e: &Error) -> TmrStatus {
    match e {
        Error::Index { .. } => TmrStatus::TMR_INDEX,
        Error::StaleEntry(_) => TmrStatus::TMR_STALE_ENTRY,
        Error::NotReady(_) => TmrStatus::TMR_NOT_READY,
        Error::Config(_) => TmrStatus::TMR_CONFIG,
        Error::Numerical { .. } | Error::NumericalAtStep { .. } => TmrStatus::TMR_NUMERICAL,
        Error::Checkpoint { .. } | Error::Io { .. } | Error::Csv(_) | Error::Json(_) => TmrStatus::TMR_IO,
        _ => TmrStatus::TMR_INVALID_ARGUMENT,
    }
}

/// Runs `f`, translating errors and panics into a status.
pub(crate) fn guard(f: impl FnOnce() -> Result<(), Fail>) -> TmrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TmrStatus::TMR_OK,
        Ok(Err(Fail::Null(what))) => {
            set_last_error(format!("{what} is null"));
            TmrStatus::TMR_NULL
        }
        Ok(Err(Fail::Arg(msg))) => {
            set_last_error(msg);
            TmrStatus::TMR_INVALID_ARGUMENT
        }
        Ok(Err(Fail::Core(e))) => {
            set_last_error(e.to_string());
            status_of(&e)
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            TmrStatus::TMR_PANIC
        }
    }
}

pub(crate) unsafe fn handle<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(what))
}

pub(crate) unsafe fn out<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(what))
}

pub(crate) unsafe fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

pub(crate) unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &'static str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

pub(crate) unsafe fn string<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Arg(format!("{what} is not valid UTF-8")))
}

//! C ABI for the reconstruction pipeline: opaque handles over the trained
//! store and reconstruction results, status codes instead of panics, and a
//! thread-local last-error message.
//!
//! The generated header lives in `include/flowrec.h`; link against the
//! `staticlib` or `cdylib` artifact.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use flowrec::pbdw::{ReconstructionResult, Reconstructor};
use flowrec::pipeline::{OnlineContext, ReconstructMode};
use flowrec::Error;

/// Status of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowrecStatus {
    Ok = 0,
    /// I/O failure (missing or unreadable store).
    Io = 1,
    /// Invalid arguments or configuration.
    Usage = 2,
    /// Numerical failure (ill-conditioned or unstable problem).
    Numerical = 3,
    /// A null pointer was passed where data was required.
    NullArgument = 4,
    /// Internal panic; the message holds details.
    Panic = 5,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let clean = msg.replace('\0', " ");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = CString::new(clean).unwrap());
}

fn status_of(err: &Error) -> FlowrecStatus {
    match err {
        Error::Config(_)
        | Error::Domain(_)
        | Error::TagMismatch { .. }
        | Error::OutOfRange(_)
        | Error::Store(_) => FlowrecStatus::Usage,
        Error::Io { .. } => FlowrecStatus::Io,
        _ => FlowrecStatus::Numerical,
    }
}

/// Opaque handle over a loaded trained store plus its observation model.
pub struct FlowrecContext {
    ctx: OnlineContext,
}

/// Opaque handle over one reconstruction result.
pub struct FlowrecResult {
    result: ReconstructionResult,
    space: &'static str,
}

/// Last error message of this thread; the pointer stays valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn flowrec_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Opens a trained store directory. On success writes a context handle that
/// must be released with `flowrec_context_free`.
#[no_mangle]
pub extern "C" fn flowrec_context_open(
    trained_dir: *const c_char,
    out: *mut *mut FlowrecContext,
) -> FlowrecStatus {
    if trained_dir.is_null() || out.is_null() {
        set_error("null pointer argument");
        return FlowrecStatus::NullArgument;
    }
    let path = match unsafe { CStr::from_ptr(trained_dir) }.to_str() {
        Ok(s) => Path::new(s).to_path_buf(),
        Err(_) => {
            set_error("trained_dir is not valid UTF-8");
            return FlowrecStatus::Usage;
        }
    };
    let loaded = catch_unwind(AssertUnwindSafe(|| OnlineContext::load(&path)));
    match loaded {
        Ok(Ok(ctx)) => {
            unsafe { *out = Box::into_raw(Box::new(FlowrecContext { ctx })) };
            FlowrecStatus::Ok
        }
        Ok(Err(e)) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("panic while loading the trained store");
            FlowrecStatus::Panic
        }
    }
}

#[no_mangle]
pub extern "C" fn flowrec_context_free(ctx: *mut FlowrecContext) {
    if !ctx.is_null() {
        drop(unsafe { Box::from_raw(ctx) });
    }
}

/// Number of voxel measurements the context expects.
#[no_mangle]
pub extern "C" fn flowrec_measurement_count(ctx: *const FlowrecContext) -> usize {
    if ctx.is_null() {
        return 0;
    }
    unsafe { &*ctx }.ctx.wu.m()
}

/// Reconstructs from a raw measurement vector at observed (t, hr).
///
/// `mode` is one of "pbdw", "joint", "ls", "cls"; `n` overrides the reduced
/// dimension when nonzero. The result handle must be released with
/// `flowrec_result_free`.
#[no_mangle]
pub extern "C" fn flowrec_reconstruct(
    ctx: *const FlowrecContext,
    measurements: *const f64,
    len: usize,
    t: f64,
    hr: f64,
    mode: *const c_char,
    n: usize,
    out: *mut *mut FlowrecResult,
) -> FlowrecStatus {
    if ctx.is_null() || measurements.is_null() || mode.is_null() || out.is_null() {
        set_error("null pointer argument");
        return FlowrecStatus::NullArgument;
    }
    let ctx = &unsafe { &*ctx }.ctx;
    let mode_str = match unsafe { CStr::from_ptr(mode) }.to_str() {
        Ok(s) => s,
        Err(_) => {
            set_error("mode is not valid UTF-8");
            return FlowrecStatus::Usage;
        }
    };
    let mode: ReconstructMode = match mode_str.parse() {
        Ok(m) => m,
        Err(e) => {
            set_error(&e.to_string());
            return FlowrecStatus::Usage;
        }
    };
    let z = unsafe { std::slice::from_raw_parts(measurements, len) };
    let run = catch_unwind(AssertUnwindSafe(|| -> Result<FlowrecResult, Error> {
        let (grid, w, space) = match mode {
            ReconstructMode::Joint => (&ctx.grid_p, &ctx.wp, "joint"),
            _ => (&ctx.grid_u, &ctx.wu, "velocity"),
        };
        if z.len() != w.m() {
            return Err(Error::Config(format!("expected {} measurements, got {}", w.m(), z.len())));
        }
        let rec = Reconstructor::new(grid, w);
        let cell = grid.locate(t, hr)?;
        let n_override = (n > 0).then_some(n);
        let result = match mode {
            ReconstructMode::Pbdw | ReconstructMode::Joint => rec.reconstruct_in_cell(z, cell, n_override),
            ReconstructMode::Ls => {
                let nn = n_override.unwrap_or(grid.cell(cell.0, cell.1).n_star);
                rec.ls(z, cell, nn)
            }
            ReconstructMode::Cls => {
                let nn = n_override.unwrap_or(grid.cell(cell.0, cell.1).n_star);
                rec.cls(z, cell, nn)
            }
        }?;
        Ok(FlowrecResult { result, space })
    }));
    match run {
        Ok(Ok(result)) => {
            unsafe { *out = Box::into_raw(Box::new(result)) };
            FlowrecStatus::Ok
        }
        Ok(Err(e)) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("panic during reconstruction");
            FlowrecStatus::Panic
        }
    }
}

#[no_mangle]
pub extern "C" fn flowrec_result_free(result: *mut FlowrecResult) {
    if !result.is_null() {
        drop(unsafe { Box::from_raw(result) });
    }
}

/// Length of the reconstructed coefficient vector.
#[no_mangle]
pub extern "C" fn flowrec_result_field_len(result: *const FlowrecResult) -> usize {
    if result.is_null() {
        return 0;
    }
    unsafe { &*result }.result.field.len()
}

/// Copies the reconstructed coefficients into a caller buffer of exactly
/// `len` doubles.
#[no_mangle]
pub extern "C" fn flowrec_result_copy_field(
    result: *const FlowrecResult,
    out: *mut f64,
    len: usize,
) -> FlowrecStatus {
    if result.is_null() || out.is_null() {
        set_error("null pointer argument");
        return FlowrecStatus::NullArgument;
    }
    let field = &unsafe { &*result }.result.field;
    if len != field.len() {
        set_error(&format!("buffer holds {len} doubles, field needs {}", field.len()));
        return FlowrecStatus::Usage;
    }
    unsafe { std::ptr::copy_nonoverlapping(field.coeffs.as_ptr(), out, len) };
    FlowrecStatus::Ok
}

/// Diagnostics of a reconstruction as a JSON document; release the string
/// with `flowrec_string_free`.
#[no_mangle]
pub extern "C" fn flowrec_result_diagnostics_json(result: *const FlowrecResult) -> *mut c_char {
    if result.is_null() {
        return std::ptr::null_mut();
    }
    let r = unsafe { &*result };
    let json = serde_json::json!({
        "space": r.space,
        "cell": [r.result.cell_used.0, r.result.cell_used.1],
        "n_used": r.result.n_used,
        "beta": r.result.beta_used,
        "residual": if r.result.residual.is_nan() { serde_json::Value::Null } else { r.result.residual.into() },
        "bound": r.result.bound,
        "field_len": r.result.field.len(),
    });
    CString::new(json.to_string()).map(CString::into_raw).unwrap_or(std::ptr::null_mut())
}

#[no_mangle]
pub extern "C" fn flowrec_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(unsafe { CString::from_raw(s) });
    }
}


//! C ABI over the architecture parser, the smoothness calculus, gradient
//! checks and the oracle agreement bench.
//!
//! Every function returns an `int32_t` status; `CHAINOPT_OK` is 0. On failure
//! the message is kept per thread and read with `chainopt_last_error_message`.
//! Handles are opaque and released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use chainopt::arch::{self, ArchFile};
use chainopt::report::{gradcheck, oracle_bench, smoothness_report, SmoothReport};
use chainopt::{Error, Mag};

pub const CHAINOPT_OK: i32 = 0;
pub const CHAINOPT_ERR_NULL: i32 = 1;
pub const CHAINOPT_ERR_UTF8: i32 = 2;
pub const CHAINOPT_ERR_PARSE: i32 = 3;
pub const CHAINOPT_ERR_DIMENSION: i32 = 4;
pub const CHAINOPT_ERR_NUMERIC: i32 = 5;
pub const CHAINOPT_ERR_INVALID: i32 = 6;
pub const CHAINOPT_ERR_UNBOUNDED: i32 = 7;
pub const CHAINOPT_ERR_RANGE: i32 = 8;
pub const CHAINOPT_ERR_OTHER: i32 = 9;
pub const CHAINOPT_ERR_PANIC: i32 = 10;

/// Parsed architecture. Opaque to C.
pub struct ChainoptArch {
    inner: ArchFile,
    report: Option<SmoothReport>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).ok());
}

fn code_of(e: &Error) -> i32 {
    match e {
        Error::Parse { .. } => CHAINOPT_ERR_PARSE,
        Error::Dimension(_) => CHAINOPT_ERR_DIMENSION,
        Error::Numeric { .. } | Error::NotPositiveDefinite(_) | Error::Nonconvex(_) => CHAINOPT_ERR_NUMERIC,
        Error::Invalid(_) | Error::UnknownLayer(_) => CHAINOPT_ERR_INVALID,
        Error::Unbounded(_) => CHAINOPT_ERR_UNBOUNDED,
        _ => CHAINOPT_ERR_OTHER,
    }
}

struct Fail(i32, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(code_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            CHAINOPT_OK
        }
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic");
            CHAINOPT_ERR_PANIC
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Fail> {
    if p.is_null() {
        Err(Fail(CHAINOPT_ERR_NULL, format!("{what} is null")))
    } else {
        Ok(())
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    non_null(p, what)?;
    CStr::from_ptr(p).to_str().map_err(|_| Fail(CHAINOPT_ERR_UTF8, format!("{what} is not valid UTF-8")))
}

unsafe fn arch_mut<'a>(p: *mut ChainoptArch) -> Result<&'a mut ChainoptArch, Fail> {
    non_null(p, "arch")?;
    Ok(&mut *p)
}

fn boxed(inner: ArchFile) -> *mut ChainoptArch {
    Box::into_raw(Box::new(ChainoptArch { inner, report: None }))
}

fn ln_of(x: Mag) -> f64 {
    if x.is_zero() {
        f64::NEG_INFINITY
    } else {
        x.ln()
    }
}

fn report(a: &mut ChainoptArch) -> Result<&SmoothReport, Fail> {
    if a.report.is_none() {
        a.report = Some(smoothness_report(&a.inner)?);
    }
    Ok(a.report.as_ref().expect("just computed"))
}

/// Parses architecture text. On success `*out` owns a new handle.
///
/// # Safety
/// `text` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn chainopt_arch_parse(text: *const c_char, out: *mut *mut ChainoptArch) -> i32 {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let a = arch::parse(str_arg(text, "text")?)?;
        *out = boxed(a);
        Ok(())
    })
}

/// Reads and parses an architecture file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn chainopt_arch_load(path: *const c_char, out: *mut *mut ChainoptArch) -> i32 {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let a = arch::parse_file(str_arg(path, "path")?)?;
        *out = boxed(a);
        Ok(())
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `arch` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn chainopt_arch_free(arch: *mut ChainoptArch) {
    if !arch.is_null() {
        drop(Box::from_raw(arch));
    }
}

/// Number of layers τ.
///
/// # Safety
/// `arch` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn chainopt_arch_num_layers(arch: *mut ChainoptArch, out: *mut usize) -> i32 {
    guard(|| {
        non_null(out, "out")?;
        *out = arch_mut(arch)?.inner.spec.len();
        Ok(())
    })
}

/// Sets the batch size m.
///
/// # Safety
/// `arch` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn chainopt_arch_set_batch(arch: *mut ChainoptArch, batch: usize) -> i32 {
    guard(|| {
        let a = arch_mut(arch)?;
        a.inner = a.inner.with_batch(batch)?;
        a.report = None;
        Ok(())
    })
}

/// Replaces every batch-norm ε.
///
/// # Safety
/// `arch` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn chainopt_arch_set_batchnorm_eps(arch: *mut ChainoptArch, eps: f64) -> i32 {
    guard(|| {
        let a = arch_mut(arch)?;
        a.inner = a.inner.with_batchnorm_eps(eps)?;
        a.report = None;
        Ok(())
    })
}

/// Sets every parameter radius and the input norm.
///
/// # Safety
/// `arch` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn chainopt_arch_set_domain(arch: *mut ChainoptArch, radius: f64, input_norm: f64) -> i32 {
    guard(|| {
        let a = arch_mut(arch)?;
        a.inner.domain = chainopt::BoundedDomain::uniform(a.inner.spec.len(), radius, input_norm)?;
        a.report = None;
        Ok(())
    })
}

/// Natural logs of (m_t, ℓ_t, L_t) after layer `layer` (1-based); 0 selects
/// the chain output. +∞ marks an unbounded constant.
///
/// # Safety
/// `arch` must be a live handle; `ln_m`, `ln_l`, `ln_big_l` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn chainopt_smoothness(
    arch: *mut ChainoptArch,
    layer: usize,
    ln_m: *mut f64,
    ln_l: *mut f64,
    ln_big_l: *mut f64,
) -> i32 {
    guard(|| {
        non_null(ln_m, "ln_m")?;
        non_null(ln_l, "ln_l")?;
        non_null(ln_big_l, "ln_big_l")?;
        let rep = report(arch_mut(arch)?)?;
        let t = match layer {
            0 => rep.output,
            k if k <= rep.rows.len() => rep.rows[k - 1].bounds,
            k => return Err(Fail(CHAINOPT_ERR_RANGE, format!("layer {k} out of 1..={}", rep.rows.len()))),
        };
        *ln_m = ln_of(t.m);
        *ln_l = ln_of(t.l);
        *ln_big_l = ln_of(t.big_l);
        Ok(())
    })
}

/// Largest relative error of directional backward derivatives against
/// central differences at a seeded point, on a batch of `batch` samples.
///
/// # Safety
/// `arch` must be a live handle and `max_rel_error` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn chainopt_gradcheck(
    arch: *mut ChainoptArch,
    batch: usize,
    seed: u64,
    max_rel_error: *mut f64,
) -> i32 {
    guard(|| {
        non_null(max_rel_error, "max_rel_error")?;
        let a = arch_mut(arch)?.inner.with_batch(batch)?;
        let h = a.objective.synthetic(a.spec.batch, a.spec.output_dim(), seed)?;
        let rows = gradcheck(&a.spec, h.as_ref(), seed)?;
        *max_rel_error = rows.iter().map(|r| r.rel_error).fold(0.0, f64::max);
        Ok(())
    })
}

/// Relative disagreement of the DP Newton step and the dual Gauss-Newton
/// step with dense solves, on a softplus chain of `tau` layers.
///
/// # Safety
/// `dp_error` and `dual_error` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn chainopt_oracle_agreement(
    tau: usize,
    width: usize,
    batch: usize,
    kappa: f64,
    seed: u64,
    dp_error: *mut f64,
    dual_error: *mut f64,
) -> i32 {
    guard(|| {
        non_null(dp_error, "dp_error")?;
        non_null(dual_error, "dual_error")?;
        let rows = oracle_bench(&[tau], width, batch, kappa, seed)?;
        *dp_error = rows[0].dp_error;
        *dual_error = rows[0].dual_error;
        Ok(())
    })
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `len`). Returns the full message length in bytes,
/// 0 when there is no error.
///
/// # Safety
/// `buf` must point to `len` writable bytes, or be null with `len` 0.
#[no_mangle]
pub unsafe extern "C" fn chainopt_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| match e.borrow().as_ref() {
        None => {
            if !buf.is_null() && len > 0 {
                *buf = 0;
            }
            0
        }
        Some(msg) => {
            let bytes = msg.as_bytes();
            if !buf.is_null() && len > 0 {
                let n = bytes.len().min(len - 1);
                ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
                *buf.add(n) = 0;
            }
            bytes.len()
        }
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn chainopt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

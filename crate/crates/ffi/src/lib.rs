//! C ABI over `sbp-core`: mask sampling and intersection, keep-ratio
//! schedules, the attention memory model and the SBP linear backward kernel.
//!
//! Every fallible call returns an [`SbpStatus`]; on failure the message is
//! available from [`sbp_last_error_message`] on the same thread. Panics are
//! caught at the boundary and reported as `SBP_STATUS_PANIC`.

use sbp_core::analysis::{mhsa_memory_ratio, ratio_to_f64};
use sbp_core::ops::{linear_backward_sbp, DropMode, LinearLayer};
use sbp_core::sampling::{build_schedule, intersect_masks, sample_grid_mask, sample_random_mask, IndexMask, KeepRatio, ScheduleKind};
use sbp_core::tensor::{Shape, Tensor};
use sbp_core::Error;
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SbpStatus {
    Ok = 0,
    NullPointer = 1,
    Config = 2,
    Dimension = 3,
    Index = 4,
    NonFinite = 5,
    Contract = 6,
    Io = 7,
    InvalidUtf8 = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SbpDropMode {
    QueryOnly = 0,
    Qkv = 1,
    Head = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SbpScheduleKind {
    Uniform = 0,
    Increasing = 1,
    Decreasing = 2,
}

/// Opaque keep/drop partition of an index grid.
pub struct SbpMask(IndexMask);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

enum Failure {
    Core(Error),
    Null(&'static str),
    Utf8,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SbpStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SbpStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            SbpStatus::NullPointer
        }
        Ok(Err(Failure::Utf8)) => {
            set_error("string is not valid UTF-8".into());
            SbpStatus::InvalidUtf8
        }
        Ok(Err(Failure::Core(e))) => {
            let status = match &e {
                Error::Config(_) => SbpStatus::Config,
                Error::Dimension(_) => SbpStatus::Dimension,
                Error::Index(_) => SbpStatus::Index,
                Error::NonFinite(_) => SbpStatus::NonFinite,
                Error::Contract(_) => SbpStatus::Contract,
                Error::Io(_) => SbpStatus::Io,
            };
            set_error(e.to_string());
            status
        }
        Err(p) => {
            let msg = p.downcast_ref::<&str>().map(|s| s.to_string()).or_else(|| p.downcast_ref::<String>().cloned());
            set_error(format!("panic: {}", msg.unwrap_or_else(|| "unknown".into())));
            SbpStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &'static str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn slice_mut<'a, T>(ptr: *mut T, len: usize, what: &'static str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if ptr.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

unsafe fn mask_ref<'a>(m: *const SbpMask, what: &'static str) -> Result<&'a IndexMask, Failure> {
    m.as_ref().map(|m| &m.0).ok_or(Failure::Null(what))
}

unsafe fn put<T>(out: *mut T, value: T, what: &'static str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::Null(what));
    }
    out.write(value);
    Ok(())
}

fn boxed(m: IndexMask) -> *mut SbpMask {
    Box::into_raw(Box::new(SbpMask(m)))
}

unsafe fn sample(
    dims: *const usize,
    ndim: usize,
    keep_num: u64,
    keep_den: u64,
    seed: u64,
    out: *mut *mut SbpMask,
    f: fn(&Shape, KeepRatio, u64) -> sbp_core::Result<IndexMask>,
) -> SbpStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let shape = Shape::new(slice(dims, ndim, "dims")?.to_vec())?;
        let m = f(&shape, KeepRatio::new(keep_num, keep_den)?, seed)?;
        put(out, boxed(m), "out")
    })
}

/// Message of the last failed call on this thread, or NULL. Free with
/// [`sbp_string_free`].
#[no_mangle]
pub extern "C" fn sbp_last_error_message() -> *mut c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null_mut(), |c| c.clone().into_raw()))
}

/// # Safety
/// `s` must be NULL or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sbp_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Grid (lattice) mask over a `dims[0] × … × dims[ndim-1]` grid keeping
/// `keep_num/keep_den` of the positions.
///
/// # Safety
/// `dims` must point to `ndim` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sbp_mask_grid(
    dims: *const usize,
    ndim: usize,
    keep_num: u64,
    keep_den: u64,
    seed: u64,
    out: *mut *mut SbpMask,
) -> SbpStatus {
    sample(dims, ndim, keep_num, keep_den, seed, out, sample_grid_mask)
}

/// Uniformly random mask with exactly `keep_num/keep_den` of the positions kept.
///
/// # Safety
/// As for [`sbp_mask_grid`].
#[no_mangle]
pub unsafe extern "C" fn sbp_mask_random(
    dims: *const usize,
    ndim: usize,
    keep_num: u64,
    keep_den: u64,
    seed: u64,
    out: *mut *mut SbpMask,
) -> SbpStatus {
    sample(dims, ndim, keep_num, keep_den, seed, out, sample_random_mask)
}

/// Mask keeping the listed row-major indices.
///
/// # Safety
/// `dims` must point to `ndim` values and `keep` to `n_keep` values.
#[no_mangle]
pub unsafe extern "C" fn sbp_mask_from_keep(dims: *const usize, ndim: usize, keep: *const usize, n_keep: usize, out: *mut *mut SbpMask) -> SbpStatus {
    guard(|| {
        let shape = Shape::new(slice(dims, ndim, "dims")?.to_vec())?;
        let m = IndexMask::from_keep(shape, slice(keep, n_keep, "keep")?.iter().copied())?;
        put(out, boxed(m), "out")
    })
}

/// Keeps positions kept by both `a` and `b`.
///
/// # Safety
/// `a` and `b` must be live masks from this library.
#[no_mangle]
pub unsafe extern "C" fn sbp_mask_intersect(a: *const SbpMask, b: *const SbpMask, out: *mut *mut SbpMask) -> SbpStatus {
    guard(|| {
        let m = intersect_masks(mask_ref(a, "a")?, mask_ref(b, "b")?)?;
        put(out, boxed(m), "out")
    })
}

/// Number of grid positions; 0 for NULL.
///
/// # Safety
/// `m` must be NULL or a live mask.
#[no_mangle]
pub unsafe extern "C" fn sbp_mask_total(m: *const SbpMask) -> usize {
    m.as_ref().map_or(0, |m| m.0.total())
}

/// Number of kept positions; 0 for NULL.
///
/// # Safety
/// `m` must be NULL or a live mask.
#[no_mangle]
pub unsafe extern "C" fn sbp_mask_keep_count(m: *const SbpMask) -> usize {
    m.as_ref().map_or(0, |m| m.0.keep().len())
}

/// Copies the sorted kept indices into `buf`. `*written` receives the kept
/// count even when `cap` is too small (then `SBP_STATUS_DIMENSION`).
///
/// # Safety
/// `buf` must have room for `cap` values; `written` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sbp_mask_keep_indices(m: *const SbpMask, buf: *mut usize, cap: usize, written: *mut usize) -> SbpStatus {
    guard(|| {
        let keep = mask_ref(m, "mask")?.keep();
        put(written, keep.len(), "written")?;
        if keep.len() > cap {
            return Err(Error::Dimension(format!("{} kept indices, buffer holds {cap}", keep.len())).into());
        }
        slice_mut(buf, keep.len(), "buf")?.copy_from_slice(keep);
        Ok(())
    })
}

/// Text form of the mask; free with [`sbp_string_free`].
///
/// # Safety
/// `m` must be a live mask; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sbp_mask_to_text(m: *const SbpMask, out: *mut *mut c_char) -> SbpStatus {
    guard(|| {
        let text = CString::new(mask_ref(m, "mask")?.to_text()).map_err(|_| Failure::Utf8)?;
        put(out, text.into_raw(), "out")
    })
}

/// Parses the text form written by [`sbp_mask_to_text`].
///
/// # Safety
/// `text` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sbp_mask_from_text(text: *const c_char, out: *mut *mut SbpMask) -> SbpStatus {
    guard(|| {
        if text.is_null() {
            return Err(Failure::Null("text"));
        }
        let s = CStr::from_ptr(text).to_str().map_err(|_| Failure::Utf8)?;
        put(out, boxed(IndexMask::from_text(s)?), "out")
    })
}

/// # Safety
/// `m` must be NULL or a mask from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sbp_mask_free(m: *mut SbpMask) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Cached-activation ratio of an attention layer under SBP with head width
/// `head_dim` and `tokens` tokens. Head dropping has no analytic model.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sbp_mhsa_memory_ratio(
    keep_num: u64,
    keep_den: u64,
    head_dim: u64,
    tokens: u64,
    mode: SbpDropMode,
    out: *mut f64,
) -> SbpStatus {
    guard(|| {
        let mode = match mode {
            SbpDropMode::QueryOnly => DropMode::QueryOnly,
            SbpDropMode::Qkv => DropMode::Qkv,
            SbpDropMode::Head => DropMode::Head,
        };
        let r = mhsa_memory_ratio(KeepRatio::new(keep_num, keep_den)?, head_dim, tokens, mode)?;
        put(out, ratio_to_f64(r), "out")
    })
}

/// Writes `n_layers` per-layer keep ratios into `out` (room for `cap`).
///
/// # Safety
/// `out` must have room for `cap` values.
#[no_mangle]
pub unsafe extern "C" fn sbp_build_schedule(
    kind: SbpScheduleKind,
    avg_num: u64,
    avg_den: u64,
    n_layers: usize,
    out: *mut f64,
    cap: usize,
) -> SbpStatus {
    guard(|| {
        let kind = match kind {
            SbpScheduleKind::Uniform => ScheduleKind::Uniform,
            SbpScheduleKind::Increasing => ScheduleKind::Increasing,
            SbpScheduleKind::Decreasing => ScheduleKind::Decreasing,
        };
        let s = build_schedule(kind, KeepRatio::new(avg_num, avg_den)?, n_layers)?;
        if cap < n_layers {
            return Err(Error::Dimension(format!("{n_layers} layers, buffer holds {cap}")).into());
        }
        for (o, r) in slice_mut(out, n_layers, "out")?.iter_mut().zip(&s.ratios) {
            *o = r.to_f64();
        }
        Ok(())
    })
}

/// SBP backward of `y = x·w (+ b)` for row-major `x: rows × c_in`,
/// `w: c_in × c_out` and upstream `up: rows × c_out`, where `rows` is a
/// multiple of the mask's position count. Writes `dw` (`c_in × c_out`),
/// `dx` (`rows × c_in`) and, when `db` is not NULL, `db` (`c_out`).
/// Dropped rows of `x` and `up` are never read.
///
/// # Safety
/// Every non-NULL pointer must reference the number of values stated above.
#[no_mangle]
pub unsafe extern "C" fn sbp_linear_backward_sbp(
    x: *const f64,
    rows: usize,
    c_in: usize,
    w: *const f64,
    c_out: usize,
    up: *const f64,
    mask: *const SbpMask,
    dw: *mut f64,
    db: *mut f64,
    dx: *mut f64,
) -> SbpStatus {
    guard(|| {
        let mask = mask_ref(mask, "mask")?;
        let bias = (!db.is_null()).then(|| Tensor::new([c_out], vec![0.0; c_out])).transpose()?;
        let layer = LinearLayer::new(Tensor::new([c_in, c_out], slice(w, c_in * c_out, "w")?.to_vec())?, bias)?;
        let xt = Tensor::new([rows, c_in], slice(x, rows * c_in, "x")?.to_vec())?;
        let upt = Tensor::new([rows, c_out], slice(up, rows * c_out, "up")?.to_vec())?;
        let g = linear_backward_sbp(&layer, &xt, &upt, mask)?;
        slice_mut(dw, c_in * c_out, "dw")?.copy_from_slice(g.dw.data());
        slice_mut(dx, rows * c_in, "dx")?.copy_from_slice(g.dx.data());
        if let Some(b) = g.db {
            slice_mut(db, c_out, "db")?.copy_from_slice(b.data());
        }
        Ok(())
    })
}

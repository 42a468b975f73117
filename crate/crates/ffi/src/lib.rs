//! C ABI over `dmrimap`.
//!
//! Objects are opaque handles created by `dmr_*_read`/`_new`/`_load` and
//! released with the matching `_free`. Every fallible call returns a
//! `DmrStatus`; on failure `dmr_last_error()` describes the cause for the
//! calling thread until the next failing call on that thread.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use dmrimap::cyclegan::CycleGan;
use dmrimap::dti::{fa, fit_volume, md, scalar_maps, EigenTriple};
use dmrimap::metrics::{ssim_map, SsimParams};
use dmrimap::register::{register_demons, warp_apply, RegConfig};
use dmrimap::volume::{read_nifti, write_nifti, GradientScheme, Slice2D, Volume};
use dmrimap::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DmrStatus {
    Ok = 0,
    NullArgument = 1,
    Io = 2,
    Format = 3,
    Invalid = 4,
    Numeric = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// A 3D scalar volume.
pub struct DmrVolume {
    inner: Volume,
}

/// A trained translation model: two generators and two critics.
pub struct DmrModel {
    inner: CycleGan,
}

/// Generator selection for `dmr_model_translate`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DmrDirection {
    AToB = 0,
    BToA = 1,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> DmrStatus {
    match e {
        Error::Io { .. } => DmrStatus::Io,
        Error::BadMagic(_)
        | Error::UnsupportedDatatype(_)
        | Error::InvalidHeader(_)
        | Error::Truncated { .. }
        | Error::Parse(_)
        | Error::Checkpoint(_)
        | Error::Json(_) => DmrStatus::Format,
        e if e.is_numeric() => DmrStatus::Numeric,
        _ => DmrStatus::Invalid,
    }
}

enum Failure {
    Null(&'static str),
    Small(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type FfiResult = std::result::Result<(), Failure>;

fn guard(f: impl FnOnce() -> FfiResult) -> DmrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DmrStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer passed for {what}"));
            DmrStatus::NullArgument
        }
        Ok(Err(Failure::Small(msg))) => {
            set_error(msg);
            DmrStatus::BufferTooSmall
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            DmrStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &'static str) -> std::result::Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Lib(Error::Parse(format!("{what} is not valid UTF-8"))))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &'static str) -> std::result::Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &'static str) -> std::result::Result<&'a mut T, Failure> {
    p.as_mut().ok_or(Failure::Null(what))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &'static str) -> std::result::Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn copy_out(src: &[f64], dst: *mut f64, cap: usize, what: &'static str) -> FfiResult {
    if cap < src.len() {
        return Err(Failure::Small(format!("{what} holds {cap} values, {} needed", src.len())));
    }
    if dst.is_null() {
        return Err(Failure::Null(what));
    }
    ptr::copy_nonoverlapping(src.as_ptr(), dst, src.len());
    Ok(())
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn dmr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn dmr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a volume from `dims[0]*dims[1]*dims[2]` x-fastest values.
#[no_mangle]
pub unsafe extern "C" fn dmr_volume_new(
    dims: *const usize,
    spacing: *const f64,
    data: *const f64,
    len: usize,
    out: *mut *mut DmrVolume,
) -> DmrStatus {
    guard(|| {
        let d = slice_arg(dims, 3, "dims")?;
        let s = slice_arg(spacing, 3, "spacing")?;
        let values = slice_arg(data, len, "data")?;
        let out = out_arg(out, "out")?;
        let v = Volume::new([d[0], d[1], d[2]], [s[0], s[1], s[2]], values.to_vec())?;
        *out = boxed(DmrVolume { inner: v });
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn dmr_volume_read(path: *const c_char, out: *mut *mut DmrVolume) -> DmrStatus {
    guard(|| {
        let p = path_arg(path, "path")?;
        let out = out_arg(out, "out")?;
        *out = boxed(DmrVolume { inner: read_nifti(p)? });
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn dmr_volume_write(vol: *const DmrVolume, path: *const c_char) -> DmrStatus {
    guard(|| {
        let v = ref_arg(vol, "vol")?;
        let p = path_arg(path, "path")?;
        write_nifti(&v.inner, p)?;
        Ok(())
    })
}

/// Writes the three dimensions into `dims_out`.
#[no_mangle]
pub unsafe extern "C" fn dmr_volume_dims(vol: *const DmrVolume, dims_out: *mut usize) -> DmrStatus {
    guard(|| {
        let v = ref_arg(vol, "vol")?;
        if dims_out.is_null() {
            return Err(Failure::Null("dims_out"));
        }
        ptr::copy_nonoverlapping(v.inner.dims().as_ptr(), dims_out, 3);
        Ok(())
    })
}

/// Copies the voxel values (x fastest) into `buf`, which holds `cap` values.
#[no_mangle]
pub unsafe extern "C" fn dmr_volume_copy_data(vol: *const DmrVolume, buf: *mut f64, cap: usize) -> DmrStatus {
    guard(|| {
        let v = ref_arg(vol, "vol")?;
        copy_out(v.inner.data(), buf, cap, "buf")
    })
}

#[no_mangle]
pub unsafe extern "C" fn dmr_volume_free(vol: *mut DmrVolume) {
    if !vol.is_null() {
        drop(Box::from_raw(vol));
    }
}

/// Weighted least-squares tensor fit of `n` volumes with b-values `bvals[n]`
/// and unit directions `dirs[3n]`. `mask` may be null. Returns FA and MD maps.
#[no_mangle]
pub unsafe extern "C" fn dmr_fit_dti(
    dwi: *const *const DmrVolume,
    n: usize,
    bvals: *const f64,
    dirs: *const f64,
    mask: *const DmrVolume,
    fa_out: *mut *mut DmrVolume,
    md_out: *mut *mut DmrVolume,
) -> DmrStatus {
    guard(|| {
        let handles = slice_arg(dwi, n, "dwi")?;
        let vols = handles
            .iter()
            .map(|&h| ref_arg(h, "dwi entry").map(|v| v.inner.clone()))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let b = slice_arg(bvals, n, "bvals")?.to_vec();
        let g = slice_arg(dirs, 3 * n, "dirs")?
            .chunks(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect();
        let scheme = GradientScheme::new(b, g)?;
        let mask: Option<Vec<bool>> = mask.as_ref().map(|m| m.inner.data().iter().map(|&v| v != 0.0).collect());
        let (fa_out, md_out) = (out_arg(fa_out, "fa_out")?, out_arg(md_out, "md_out")?);
        let tf = fit_volume(&vols, &scheme, mask.as_deref())?;
        let (f, m) = scalar_maps(&tf)?;
        *fa_out = boxed(DmrVolume { inner: f });
        *md_out = boxed(DmrVolume { inner: m });
        Ok(())
    })
}

/// Fractional anisotropy of three eigenvalues (any order).
#[no_mangle]
pub extern "C" fn dmr_fa(l1: f64, l2: f64, l3: f64) -> f64 {
    fa(&EigenTriple::from_values(l1, l2, l3))
}

/// Mean diffusivity of three eigenvalues.
#[no_mangle]
pub extern "C" fn dmr_md(l1: f64, l2: f64, l3: f64) -> f64 {
    md(&EigenTriple::from_values(l1, l2, l3))
}

/// Mean SSIM of two `width x height` row-major images. A non-finite `range`
/// estimates the dynamic range from the images.
#[no_mangle]
pub unsafe extern "C" fn dmr_mssim(
    a: *const f64,
    b: *const f64,
    width: usize,
    height: usize,
    range: f64,
    out: *mut f64,
) -> DmrStatus {
    guard(|| {
        let n = width * height;
        let sa = Slice2D::new(width, height, slice_arg(a, n, "a")?.to_vec())?;
        let sb = Slice2D::new(width, height, slice_arg(b, n, "b")?.to_vec())?;
        let out = out_arg(out, "out")?;
        let mut p = SsimParams::default();
        if range.is_finite() {
            p = p.with_range(range);
        }
        *out = ssim_map(&sa, &sb, None, &p)?.mssim;
        Ok(())
    })
}

/// Loads a checkpoint directory written by training.
#[no_mangle]
pub unsafe extern "C" fn dmr_model_load(dir: *const c_char, out: *mut *mut DmrModel) -> DmrStatus {
    guard(|| {
        let p = path_arg(dir, "dir")?;
        let out = out_arg(out, "out")?;
        let (model, _) = CycleGan::load(p)?;
        *out = boxed(DmrModel { inner: model });
        Ok(())
    })
}

/// Translates one `width x height` image into `out` (same size).
#[no_mangle]
pub unsafe extern "C" fn dmr_model_translate(
    model: *const DmrModel,
    direction: DmrDirection,
    input: *const f64,
    width: usize,
    height: usize,
    out: *mut f64,
) -> DmrStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let n = width * height;
        let img = Slice2D::new(width, height, slice_arg(input, n, "input")?.to_vec())?;
        let gen = match direction {
            DmrDirection::AToB => &m.inner.g_a2b,
            DmrDirection::BToA => &m.inner.g_b2a,
        };
        copy_out(gen.translate(&img)?.data(), out, n, "out")
    })
}

#[no_mangle]
pub unsafe extern "C" fn dmr_model_free(model: *mut DmrModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Demons registration of `moving` onto `fixed` with default settings.
/// Writes the displacement components and the resampled moving image,
/// each `width * height` values. `resampled` may be null.
#[no_mangle]
pub unsafe extern "C" fn dmr_register(
    moving: *const f64,
    fixed: *const f64,
    width: usize,
    height: usize,
    dx_out: *mut f64,
    dy_out: *mut f64,
    resampled: *mut f64,
) -> DmrStatus {
    guard(|| {
        let n = width * height;
        let m = Slice2D::new(width, height, slice_arg(moving, n, "moving")?.to_vec())?;
        let f = Slice2D::new(width, height, slice_arg(fixed, n, "fixed")?.to_vec())?;
        let reg = register_demons(&m, &f, &RegConfig::default())?;
        copy_out(reg.warp.dx(), dx_out, n, "dx_out")?;
        copy_out(reg.warp.dy(), dy_out, n, "dy_out")?;
        if !resampled.is_null() {
            copy_out(warp_apply(&m, &reg.warp)?.data(), resampled, n, "resampled")?;
        }
        Ok(())
    })
}

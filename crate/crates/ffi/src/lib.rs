//! C ABI over `crackres`: opaque handles, integer status codes and a
//! per-thread last-error message.
//!
//! Every function returns [`CrStatus`] and writes results through out
//! pointers. Handles are released with their matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use crackres::config::RunConfig;
use crackres::degradation::{degrade, DegradationSpec};
use crackres::experiment::predict;
use crackres::imaging::{png_io, BinaryMask, Image, Scale, KERNEL_LEN};
use crackres::metrics;
use crackres::trainer::{load_models, Models};
use crackres::Error;

/// Result of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    State = 4,
    Data = 5,
    NonFinite = 6,
    Io = 7,
    Panic = 8,
}

/// Planar image with samples in `[0, 1]`.
pub struct CrImage(Image);

/// Both networks plus the configuration they were built with.
pub struct CrModel {
    config: RunConfig,
    models: Models,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> CrStatus {
    match e {
        Error::Param(_) | Error::EmptyRegion(_) => CrStatus::InvalidArgument,
        Error::Config(_) => CrStatus::Config,
        Error::State(_) => CrStatus::State,
        Error::Data(_) | Error::Json(_) => CrStatus::Data,
        Error::NonFinite(_) => CrStatus::NonFinite,
        Error::Io(_) => CrStatus::Io,
    }
}

enum Failure {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            CrStatus::Ok
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(&format!("null pointer: {what}"));
            CrStatus::NullPointer
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic");
            CrStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn path_arg(p: *const c_char, what: &'static str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| Error::Param(format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn config_arg(p: *const c_char) -> Result<RunConfig, Failure> {
    if p.is_null() {
        return Ok(RunConfig::default());
    }
    Ok(RunConfig::load(&path_arg(p, "config_path")?)?)
}

unsafe fn write_out<T>(out: *mut T, v: T, what: &'static str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::Null(what));
    }
    out.write(v);
    Ok(())
}

fn boxed_image(img: Image) -> *mut CrImage {
    Box::into_raw(Box::new(CrImage(img)))
}

/// Message of the last failed call on this thread; empty after success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn cr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn cr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Number of taps of a blur kernel (21 x 21).
#[no_mangle]
pub extern "C" fn cr_kernel_len() -> usize {
    KERNEL_LEN
}

/// Copies `height * width * channels` planar samples into a new image.
///
/// # Safety
/// `data` must point to that many readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cr_image_new(
    height: usize,
    width: usize,
    channels: usize,
    data: *const f64,
    out: *mut *mut CrImage,
) -> CrStatus {
    guard(|| {
        if data.is_null() {
            return Err(Failure::Null("data"));
        }
        let n = height
            .checked_mul(width)
            .and_then(|v| v.checked_mul(channels))
            .ok_or(Error::Param("size overflow".into()))?;
        let img = Image::new(height, width, channels, std::slice::from_raw_parts(data, n).to_vec())?;
        write_out(out, boxed_image(img), "out")
    })
}

/// Reads a PNG file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cr_image_read_png(path: *const c_char, out: *mut *mut CrImage) -> CrStatus {
    guard(|| {
        let (img, _) = png_io::read_image(&path_arg(path, "path")?)?;
        write_out(out, boxed_image(img), "out")
    })
}

/// Writes a PNG file at 8 or 16 bits per sample.
///
/// # Safety
/// `image` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cr_image_write_png(image: *const CrImage, path: *const c_char, sixteen_bit: bool) -> CrStatus {
    guard(|| {
        let img = deref(image, "image")?;
        let depth = if sixteen_bit { png_io::Depth::Sixteen } else { png_io::Depth::Eight };
        Ok(png_io::write_image(&path_arg(path, "path")?, &img.0, depth, &[])?)
    })
}

/// Height, width and channel count of an image.
///
/// # Safety
/// `image` must be a live handle; each out pointer may be null.
#[no_mangle]
pub unsafe extern "C" fn cr_image_dims(
    image: *const CrImage,
    height: *mut usize,
    width: *mut usize,
    channels: *mut usize,
) -> CrStatus {
    guard(|| {
        let img = &deref(image, "image")?.0;
        for (p, v) in [(height, img.height()), (width, img.width()), (channels, img.channels())] {
            if !p.is_null() {
                p.write(v);
            }
        }
        Ok(())
    })
}

/// Planar samples of an image; valid while the handle lives.
///
/// # Safety
/// `image` must be a live handle or null (which yields null).
#[no_mangle]
pub unsafe extern "C" fn cr_image_data(image: *const CrImage) -> *const f64 {
    image.as_ref().map_or(std::ptr::null(), |i| i.0.data().as_ptr())
}

/// # Safety
/// `image` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn cr_image_free(image: *mut CrImage) {
    if !image.is_null() {
        drop(Box::from_raw(image));
    }
}

/// Blurs with an anisotropic Gaussian and downsamples by 4. The kernel
/// used is written to `kernel_out` when it is not null.
///
/// # Safety
/// `hr` must be a live handle, `out` writable, and `kernel_out` either
/// null or room for `cr_kernel_len()` doubles.
#[no_mangle]
pub unsafe extern "C" fn cr_degrade(
    hr: *const CrImage,
    sigma_a: f64,
    sigma_b: f64,
    theta: f64,
    out: *mut *mut CrImage,
    kernel_out: *mut f64,
) -> CrStatus {
    guard(|| {
        let spec = DegradationSpec { sigma_a, sigma_b, theta, scale: Scale::QUARTER, seed: 0 };
        spec.validate()?;
        let (lr, k) = degrade(&deref(hr, "hr")?.0, &spec)?;
        if !kernel_out.is_null() {
            std::ptr::copy_nonoverlapping(k.values().as_ptr(), kernel_out, KERNEL_LEN);
        }
        write_out(out, boxed_image(lr), "out")
    })
}

/// Freshly initialized networks for a config (null path: defaults).
///
/// # Safety
/// `config_path` must be null or a NUL-terminated string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cr_model_new(config_path: *const c_char, out: *mut *mut CrModel) -> CrStatus {
    guard(|| {
        let config = config_arg(config_path)?;
        let models = Models::new(&config);
        write_out(out, Box::into_raw(Box::new(CrModel { config, models })), "out")
    })
}

/// Loads a training checkpoint. The checkpoint must have been written
/// under the same config (hash check).
///
/// # Safety
/// `config_path` may be null; `checkpoint_dir` must be a NUL-terminated
/// string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cr_model_load(
    config_path: *const c_char,
    checkpoint_dir: *const c_char,
    out: *mut *mut CrModel,
) -> CrStatus {
    guard(|| {
        let config = config_arg(config_path)?;
        let (models, manifest) = load_models(&path_arg(checkpoint_dir, "checkpoint_dir")?, &config)?;
        manifest.check_hash(&config)?;
        write_out(out, Box::into_raw(Box::new(CrModel { config, models })), "out")
    })
}

/// # Safety
/// `model` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn cr_model_free(model: *mut CrModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Writes the 64-hex config hash of a model into `buf` (at least 65 bytes).
///
/// # Safety
/// `model` must be a live handle and `buf` writable for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn cr_model_config_hash(model: *const CrModel, buf: *mut c_char, len: usize) -> CrStatus {
    guard(|| {
        let hash = deref(model, "model")?.config.hash();
        if buf.is_null() {
            return Err(Failure::Null("buf"));
        }
        if len < hash.len() + 1 {
            return Err(Error::Param(format!("buffer of {len} bytes is too small")).into());
        }
        std::ptr::copy_nonoverlapping(hash.as_ptr().cast(), buf, hash.len());
        buf.add(hash.len()).write(0);
        Ok(())
    })
}

/// x4 super-resolution and crack probability of an LR image. `out_prob`
/// is a one-channel image; `kernel_out` (nullable) receives the estimated
/// blur kernel.
///
/// # Safety
/// Handles must be live; out pointers writable; `kernel_out` null or
/// room for `cr_kernel_len()` doubles.
#[no_mangle]
pub unsafe extern "C" fn cr_model_predict(
    model: *const CrModel,
    lr: *const CrImage,
    out_sr: *mut *mut CrImage,
    out_prob: *mut *mut CrImage,
    kernel_out: *mut f64,
) -> CrStatus {
    guard(|| {
        let m = deref(model, "model")?;
        let p = predict(&m.models, &deref(lr, "lr")?.0)?;
        if out_sr.is_null() || out_prob.is_null() {
            return Err(Failure::Null("out_sr/out_prob"));
        }
        if !kernel_out.is_null() {
            std::ptr::copy_nonoverlapping(p.kernel.values().as_ptr(), kernel_out, KERNEL_LEN);
        }
        let (h, w) = p.crack.dims();
        let prob = Image::new(h, w, 1, p.crack.data().to_vec())?;
        out_sr.write(boxed_image(p.sr));
        out_prob.write(boxed_image(prob));
        Ok(())
    })
}

unsafe fn masks(
    pred: *const u8,
    gt: *const u8,
    height: usize,
    width: usize,
) -> Result<(BinaryMask, BinaryMask), Failure> {
    if pred.is_null() || gt.is_null() {
        return Err(Failure::Null("pred/gt"));
    }
    let n = height.checked_mul(width).ok_or(Error::Param("size overflow".into()))?;
    let read = |p: *const u8| {
        BinaryMask::new(height, width, std::slice::from_raw_parts(p, n).iter().map(|&v| v != 0).collect())
    };
    Ok((read(pred)?, read(gt)?))
}

/// IoU of two row-major masks (non-zero bytes are foreground).
///
/// # Safety
/// `pred` and `gt` must hold `height * width` bytes; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cr_iou(
    pred: *const u8,
    gt: *const u8,
    height: usize,
    width: usize,
    out: *mut f64,
) -> CrStatus {
    guard(|| {
        let (p, g) = masks(pred, gt, height, width)?;
        write_out(out, metrics::iou(&p, &g)?, "out")
    })
}

/// 95th-percentile Hausdorff distance of two row-major masks, in pixels.
///
/// # Safety
/// As [`cr_iou`].
#[no_mangle]
pub unsafe extern "C" fn cr_hd95(
    pred: *const u8,
    gt: *const u8,
    height: usize,
    width: usize,
    out: *mut f64,
) -> CrStatus {
    guard(|| {
        let (p, g) = masks(pred, gt, height, width)?;
        write_out(out, metrics::hd95(&p, &g)?, "out")
    })
}

/// PSNR in dB between two images of equal shape (peak 1, capped at 100).
///
/// # Safety
/// Handles must be live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cr_psnr(a: *const CrImage, b: *const CrImage, out: *mut f64) -> CrStatus {
    guard(|| {
        let v = metrics::psnr(&deref(a, "a")?.0, &deref(b, "b")?.0)?;
        write_out(out, v, "out")
    })
}

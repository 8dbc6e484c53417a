//! C ABI over the inference engine.
//!
//! Models are opaque heap handles created by one of the `tnxt_model_*`
//! constructors and released with [`tnxt_model_free`]. Every fallible call
//! returns a [`TnxtStatus`]; on failure [`tnxt_last_error`] describes the
//! most recent error on the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use transnext::backbone::{count_flops, MacConvention, Mode, Model, ModelConfig};
use transnext::{Error, Tensor};

/// Opaque model handle.
pub struct TnxtModel {
    inner: Model<f32>,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TnxtStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidString = 2,
    ShapeError = 3,
    ConfigError = 4,
    DomainError = 5,
    ArchiveError = 6,
    IoError = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TnxtMode {
    Normal = 0,
    Linear = 1,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TnxtMacConvention {
    Mac1 = 0,
    Mac2 = 1,
}

impl From<TnxtMode> for Mode {
    fn from(m: TnxtMode) -> Self {
        match m {
            TnxtMode::Normal => Mode::Normal,
            TnxtMode::Linear => Mode::Linear,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Fail(TnxtStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Shape(_) => TnxtStatus::ShapeError,
            Error::Config(_) => TnxtStatus::ConfigError,
            Error::Domain(_) => TnxtStatus::DomainError,
            Error::Archive(_) | Error::ArchiveTensor { .. } => TnxtStatus::ArchiveError,
            Error::Io(_) => TnxtStatus::IoError,
        };
        Fail(status, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> TnxtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            TnxtStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            TnxtStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(TnxtStatus::NullArgument, format!("`{what}` is null"))
}

/// # Safety
/// `p` must be null or a NUL-terminated string.
unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail(TnxtStatus::InvalidString, format!("`{what}` is not UTF-8")))
}

/// # Safety
/// `out` must be null or valid for writes.
unsafe fn emit(out: *mut *mut TnxtModel, model: Model<f32>) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(TnxtModel { inner: model }));
    Ok(())
}

/// # Safety
/// `m` must be null or a live handle.
unsafe fn model_ref<'a>(m: *const TnxtModel) -> Result<&'a Model<f32>, Fail> {
    m.as_ref().map(|m| &m.inner).ok_or_else(|| null("model"))
}

/// Builds a stock variant (`micro`, `tiny`, `small`, `base`) with seeded
/// weights.
///
/// # Safety
/// `variant` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn tnxt_model_new_stock(variant: *const c_char, seed: u64, out: *mut *mut TnxtModel) -> TnxtStatus {
    guard(|| {
        let cfg = ModelConfig::stock(str_arg(variant, "variant")?)?;
        emit(out, Model::new_seeded(&cfg, seed)?)
    })
}

/// Builds a model from a `key=value` config file with seeded weights.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn tnxt_model_from_config_file(path: *const c_char, seed: u64, out: *mut *mut TnxtModel) -> TnxtStatus {
    guard(|| {
        let cfg = ModelConfig::from_file(str_arg(path, "path")?)?;
        emit(out, Model::new_seeded(&cfg, seed)?)
    })
}

/// Loads f32 weights for `config`, a stock variant name or config file.
///
/// # Safety
/// Both strings must be NUL-terminated; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn tnxt_model_load(config: *const c_char, weights: *const c_char, out: *mut *mut TnxtModel) -> TnxtStatus {
    guard(|| {
        let cfg = ModelConfig::resolve(str_arg(config, "config")?)?;
        emit(out, Model::load(&cfg, str_arg(weights, "weights")?)?)
    })
}

/// # Safety
/// `model` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn tnxt_model_save(model: *const TnxtModel, path: *const c_char) -> TnxtStatus {
    guard(|| Ok(model_ref(model)?.save(str_arg(path, "path")?)?))
}

/// # Safety
/// `model` must be a live handle; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn tnxt_model_param_count(model: *const TnxtModel, out: *mut u64) -> TnxtStatus {
    guard(|| {
        let n = model_ref(model)?.param_count();
        *out.as_mut().ok_or_else(|| null("out"))? = n;
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn tnxt_model_num_classes(model: *const TnxtModel, out: *mut usize) -> TnxtStatus {
    guard(|| {
        let n = model_ref(model)?.config().num_classes;
        *out.as_mut().ok_or_else(|| null("out"))? = n;
        Ok(())
    })
}

/// Classifies one `[channels, height, width]` row-major image into
/// `logits`, which must hold at least the model's class count.
///
/// # Safety
/// `image` must point to `channels·height·width` floats and `logits` to
/// `logits_len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn tnxt_model_forward(
    model: *const TnxtModel,
    image: *const f32,
    channels: usize,
    height: usize,
    width: usize,
    mode: TnxtMode,
    logits: *mut f32,
    logits_len: usize,
) -> TnxtStatus {
    guard(|| {
        let m = model_ref(model)?;
        if image.is_null() {
            return Err(null("image"));
        }
        if logits.is_null() {
            return Err(null("logits"));
        }
        let classes = m.config().num_classes;
        if logits_len < classes {
            return Err(Fail(TnxtStatus::BufferTooSmall, format!("logits buffer holds {logits_len}, need {classes}")));
        }
        let n = channels
            .checked_mul(height)
            .and_then(|v| v.checked_mul(width))
            .ok_or_else(|| Fail(TnxtStatus::ShapeError, "image extents overflow".into()))?;
        let img = Tensor::new(vec![channels, height, width], std::slice::from_raw_parts(image, n).to_vec())?;
        let y = m.forward(&img, mode.into())?;
        std::slice::from_raw_parts_mut(logits, classes).copy_from_slice(y.data());
        Ok(())
    })
}

/// Parameters and FLOPs of `config` at `height×width`.
///
/// # Safety
/// `config` must be NUL-terminated; `params` and `flops` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn tnxt_count_flops(
    config: *const c_char,
    height: usize,
    width: usize,
    mode: TnxtMode,
    convention: TnxtMacConvention,
    params: *mut u64,
    flops: *mut u64,
) -> TnxtStatus {
    guard(|| {
        let cfg = ModelConfig::resolve(str_arg(config, "config")?)?;
        let report = count_flops(&cfg, height, width, mode.into())?;
        let conv = match convention {
            TnxtMacConvention::Mac1 => MacConvention::Mac1,
            TnxtMacConvention::Mac2 => MacConvention::Mac2,
        };
        let p = params.as_mut().ok_or_else(|| null("params"))?;
        let f = flops.as_mut().ok_or_else(|| null("flops"))?;
        *p = report.total_params();
        *f = report.total_flops(conv);
        Ok(())
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tnxt_model_free(model: *mut TnxtModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Message for the last failed call on this thread, or null. Valid until
/// the next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn tnxt_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

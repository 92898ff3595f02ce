//! C ABI over `himat`.
//!
//! Objects cross the boundary as opaque handles that the caller frees with
//! the matching `*_free`. Every fallible call returns a [`HimatStatus`]; on
//! failure [`himat_last_error`] describes what went wrong on the calling
//! thread. Panics never unwind into C; they surface as `HIMAT_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use himat::config::{RunConfig, Task};
use himat::diffusion::{load_checkpoint, sample, ConditionToken, Conditioning, DitModel};
use himat::material::ToyCodec;
use himat::metrics::{glcm_score, psnr, GlcmConfig};
use himat::tensor::DType;
use himat::wavelet::{load_basis, swt_loss, SubbandWeights};
use himat::{HimatError, Tensor};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HimatStatus {
    Ok = 0,
    NullPointer = 1,
    /// Bad string, length or flag passed by the caller.
    InvalidArgument = 2,
    ShapeMismatch = 3,
    InvalidConfig = 4,
    Io = 5,
    /// Malformed tensor, image or JSON file.
    Format = 6,
    /// NaN/Inf or an out-of-range numeric input.
    Numeric = 7,
    Panic = 8,
}

/// Dense f64 tensor.
pub struct HimatTensor(Tensor);

/// A trained run directory: config, checkpoint and codec.
pub struct HimatRun {
    cfg: RunConfig,
    model: DitModel,
    codec: ToyCodec,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &HimatError) -> HimatStatus {
    match e {
        HimatError::ShapeMismatch { .. } | HimatError::OddDimensions(..) | HimatError::IndivisibleDims { .. } => HimatStatus::ShapeMismatch,
        HimatError::InvalidConfig(_) | HimatError::UnknownBasis(_) | HimatError::TokenOutOfVocab { .. } | HimatError::InsufficientPoints(_) => HimatStatus::InvalidConfig,
        HimatError::Io(_) => HimatStatus::Io,
        HimatError::Format(_) | HimatError::Image(_) | HimatError::Json(_) => HimatStatus::Format,
        HimatError::NonFinite { .. } | HimatError::NaNLoss { .. } | HimatError::TOutOfRange(_) => HimatStatus::Numeric,
        _ => HimatStatus::InvalidConfig,
    }
}

/// Error raised inside the boundary layer itself.
struct Fail(HimatStatus, String);

impl From<HimatError> for Fail {
    fn from(e: HimatError) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> HimatStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            HimatStatus::Ok
        }
        Ok(Err(Fail(s, msg))) => {
            set_error(&msg);
            s
        }
        Err(p) => {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default();
            set_error(&format!("panic: {msg}"));
            HimatStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(HimatStatus::NullPointer, format!("{what} is null"))
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn string(p: *const c_char, what: &str) -> Result<String, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map(str::to_owned).map_err(|_| Fail(HimatStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn put_f64(out: *mut f64, v: f64) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = v;
    Ok(())
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn himat_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr().cast()
}

/// Message for the last failed call on this thread; empty after a success.
/// Valid until the next call from the same thread.
#[no_mangle]
pub extern "C" fn himat_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Copies `len` values of row-major data into a new tensor of the given shape.
///
/// # Safety
/// `shape` must point to `rank` values and `data` to `len` values.
#[no_mangle]
pub unsafe extern "C" fn himat_tensor_new(shape: *const usize, rank: usize, data: *const f64, len: usize, out: *mut *mut HimatTensor) -> HimatStatus {
    guard(|| {
        if (shape.is_null() && rank > 0) || (data.is_null() && len > 0) {
            return Err(null("shape or data"));
        }
        let dims = if rank == 0 { Vec::new() } else { std::slice::from_raw_parts(shape, rank).to_vec() };
        let values = if len == 0 { Vec::new() } else { std::slice::from_raw_parts(data, len).to_vec() };
        put(out, HimatTensor(Tensor::new(&dims, values)?))
    })
}

/// # Safety
/// `t` must come from this library and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn himat_tensor_free(t: *mut HimatTensor) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// Rank of `t`, 0 for null.
///
/// # Safety
/// `t` must be null or a live tensor handle.
#[no_mangle]
pub unsafe extern "C" fn himat_tensor_rank(t: *const HimatTensor) -> usize {
    t.as_ref().map_or(0, |t| t.0.rank())
}

/// Element count of `t`, 0 for null.
///
/// # Safety
/// `t` must be null or a live tensor handle.
#[no_mangle]
pub unsafe extern "C" fn himat_tensor_numel(t: *const HimatTensor) -> usize {
    t.as_ref().map_or(0, |t| t.0.numel())
}

/// Writes the dims into `out`, which holds `cap` values.
///
/// # Safety
/// `t` must be a live tensor handle and `out` must hold `cap` values.
#[no_mangle]
pub unsafe extern "C" fn himat_tensor_shape(t: *const HimatTensor, out: *mut usize, cap: usize) -> HimatStatus {
    guard(|| {
        let t = deref(t, "tensor")?;
        let dims = t.0.shape();
        if dims.len() > cap {
            return Err(Fail(HimatStatus::InvalidArgument, format!("rank {} exceeds buffer of {cap}", dims.len())));
        }
        if !dims.is_empty() {
            if out.is_null() {
                return Err(null("out"));
            }
            ptr::copy_nonoverlapping(dims.as_ptr(), out, dims.len());
        }
        Ok(())
    })
}

/// Copies the row-major values into `out`; `len` must equal the element count.
///
/// # Safety
/// `t` must be a live tensor handle and `out` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn himat_tensor_copy_data(t: *const HimatTensor, out: *mut f64, len: usize) -> HimatStatus {
    guard(|| {
        let t = deref(t, "tensor")?;
        if len != t.0.numel() {
            return Err(Fail(HimatStatus::InvalidArgument, format!("buffer of {len} for {} elements", t.0.numel())));
        }
        if len > 0 {
            if out.is_null() {
                return Err(null("out"));
            }
            ptr::copy_nonoverlapping(t.0.data().as_ptr(), out, len);
        }
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn himat_tensor_read_himt(path: *const c_char, out: *mut *mut HimatTensor) -> HimatStatus {
    guard(|| {
        let path = string(path, "path")?;
        put(out, HimatTensor(Tensor::read_himt(path)?))
    })
}

/// Saves `t` in HIMT format, as f64 when `double_precision` is nonzero and f32 otherwise.
///
/// # Safety
/// `t` must be a live tensor handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn himat_tensor_write_himt(t: *const HimatTensor, path: *const c_char, double_precision: i32) -> HimatStatus {
    guard(|| {
        let t = deref(t, "tensor")?;
        let path = string(path, "path")?;
        let dtype = if double_precision != 0 { DType::F64 } else { DType::F32 };
        Ok(t.0.write_himt(path, dtype)?)
    })
}

/// Weighted SWT loss with the default subband weights on `[M, H, W, C]` or
/// `[B, M, H, W, C]` tensors.
///
/// # Safety
/// Handles must be live, `basis` NUL-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn himat_swt_loss(pred: *const HimatTensor, target: *const HimatTensor, basis: *const c_char, levels: usize, out: *mut f64) -> HimatStatus {
    guard(|| {
        let (p, t) = (deref(pred, "pred")?, deref(target, "target")?);
        let b = load_basis(&string(basis, "basis")?)?;
        put_f64(out, swt_loss(&p.0, &t.0, &SubbandWeights::default(), &b, levels)?)
    })
}

/// PSNR in dB; `+inf` for identical inputs.
///
/// # Safety
/// Handles must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn himat_psnr(a: *const HimatTensor, b: *const HimatTensor, peak: f64, out: *mut f64) -> HimatStatus {
    guard(|| put_f64(out, psnr(&deref(a, "a")?.0, &deref(b, "b")?.0, peak)?))
}

/// GLCM contrast of an `[H, W]` image in `[0, 1]` with the default offsets.
///
/// # Safety
/// `img` must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn himat_glcm_score(img: *const HimatTensor, levels: usize, out: *mut f64) -> HimatStatus {
    guard(|| {
        let cfg = GlcmConfig { levels, ..Default::default() };
        put_f64(out, glcm_score(&deref(img, "img")?.0, &cfg)?)
    })
}

/// Loads a directory written by `himat train`.
///
/// # Safety
/// `dir` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn himat_run_load(dir: *const c_char, out: *mut *mut HimatRun) -> HimatStatus {
    guard(|| {
        let dir = PathBuf::from(string(dir, "dir")?);
        let cfg = RunConfig::load(dir.join("config.json"))?;
        let (model, _) = load_checkpoint(dir.join("checkpoint"))?;
        let codec = ToyCodec::load(dir.join("codec"))?;
        put(out, HimatRun { cfg, model, codec })
    })
}

/// # Safety
/// `run` must come from [`himat_run_load`] and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn himat_run_free(run: *mut HimatRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Samples one decoded map stack `[3, H, W, 3]` in `[0, 1]`. `steps == 0`
/// uses the configured count; nonzero `tileable` turns on noise rolling.
///
/// # Safety
/// `run` must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn himat_run_generate(run: *const HimatRun, prompt_id: usize, steps: usize, seed: u64, tileable: i32, out: *mut *mut HimatTensor) -> HimatStatus {
    guard(|| {
        let run = deref(run, "run")?;
        if run.cfg.task != Task::Generate {
            return Err(Fail(HimatStatus::InvalidConfig, "run was trained for decomposition".into()));
        }
        let mc = &run.model.config;
        ConditionToken::prompt(prompt_id).check(mc.cond_vocab)?;
        let mut sc = run.cfg.sampler.clone();
        if steps > 0 {
            sc.steps = steps;
        }
        sc.seed = seed;
        sc.noise_rolling = tileable != 0;
        let z = sample(&run.model, &[1, mc.maps, mc.latent_height, mc.latent_width, mc.latent_channels], &Conditioning::tokens(vec![prompt_id]), &sc)?;
        let stack = run.codec.decode(&z.index_first(0))?.map(|v| v.clamp(0.0, 1.0));
        put(out, HimatTensor(stack))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn panics_become_a_status() {
        let s = guard(|| panic!("boom"));
        assert_eq!(s, HimatStatus::Panic);
        let msg = unsafe { CStr::from_ptr(himat_last_error()) }.to_str().unwrap().to_owned();
        assert_eq!(msg, "panic: boom");
        assert_eq!(guard(|| Ok(())), HimatStatus::Ok);
        assert_eq!(unsafe { CStr::from_ptr(himat_last_error()) }.to_bytes(), b"");
    }
}

//! C ABI over the severif library.
//!
//! Every fallible function returns an [`SvStatus`]; on failure a message is
//! available from [`sv_last_error`] on the same thread until the next call.
//! Models are opaque handles owned by the caller and released with
//! [`sv_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use severif::features::{self, AudioSegment, NUM_MEL};
use severif::metrics::{self, DcfParams};
use severif::model::{load_checkpoint, SpeakerNet};
use severif::{Error, Tensor};

/// Result of a call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SvStatus {
    Ok = 0,
    InvalidArgument = 1,
    Config = 2,
    Shape = 3,
    Numeric = 4,
    Format = 5,
    Missing = 6,
    Io = 7,
    NullPointer = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

/// A loaded checkpoint.
pub struct SvModel {
    net: SpeakerNet,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: SvStatus, msg: impl Into<String>) -> SvStatus {
    set_error(msg.into());
    status
}

fn status_of(e: &Error) -> SvStatus {
    match e {
        Error::InvalidArgument(_) => SvStatus::InvalidArgument,
        Error::Config(_) => SvStatus::Config,
        Error::ShapeMismatch { .. } => SvStatus::Shape,
        Error::Numeric(_) => SvStatus::Numeric,
        Error::Format { .. } => SvStatus::Format,
        Error::Missing(_) => SvStatus::Missing,
        Error::Io { .. } => SvStatus::Io,
    }
}

/// Clears the error slot, runs `f`, and turns errors and panics into codes.
fn guard(f: impl FnOnce() -> Result<(), SvStatus>) -> SvStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SvStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(SvStatus::Panic, "internal panic"),
    }
}

fn lib<T>(r: severif::Result<T>) -> Result<T, SvStatus> {
    r.map_err(|e| fail(status_of(&e), e.to_string()))
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), SvStatus> {
    if p.is_null() {
        Err(fail(SvStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

/// # Safety
/// `p` must be null or point to `n` readable values.
unsafe fn slice<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], SvStatus> {
    if n == 0 {
        return Ok(&[]);
    }
    non_null(p, what)?;
    Ok(std::slice::from_raw_parts(p, n))
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn sv_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a checkpoint. On success `*out` receives a handle to free with
/// `sv_model_free`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sv_model_load(path: *const c_char, out: *mut *mut SvModel) -> SvStatus {
    guard(|| {
        non_null(path, "path")?;
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| fail(SvStatus::InvalidArgument, "path is not UTF-8"))?;
        let net = lib(load_checkpoint(Path::new(path)))?;
        *out = Box::into_raw(Box::new(SvModel { net }));
        Ok(())
    })
}

/// Releases a handle from `sv_model_load`. Null is ignored.
///
/// # Safety
/// `model` must be null or a live handle not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sv_model_free(model: *mut SvModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Embedding width of the model, 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sv_model_embedding_dim(model: *const SvModel) -> usize {
    model.as_ref().map_or(0, |m| m.net.spec.embedding_dim)
}

/// Embeds a row-major `mel_bins × frames` log-mel matrix into `out`, which
/// must hold `sv_model_embedding_dim` floats.
///
/// # Safety
/// `features` must hold `mel_bins * frames` floats and `out` `out_len`.
#[no_mangle]
pub unsafe extern "C" fn sv_model_extract(
    model: *mut SvModel,
    features: *const f32,
    mel_bins: usize,
    frames: usize,
    out: *mut f32,
    out_len: usize,
) -> SvStatus {
    guard(|| {
        let m = model
            .as_mut()
            .ok_or_else(|| fail(SvStatus::NullPointer, "model is null"))?;
        non_null(out, "out")?;
        let dim = m.net.spec.embedding_dim;
        if out_len < dim {
            return Err(fail(SvStatus::BufferTooSmall, format!("out holds {out_len} floats, need {dim}")));
        }
        let n = mel_bins
            .checked_mul(frames)
            .ok_or_else(|| fail(SvStatus::InvalidArgument, "feature size overflows"))?;
        let data = slice(features, n, "features")?.to_vec();
        let x = lib(Tensor::new([mel_bins, frames], data))?;
        let e = lib(m.net.extract_embedding(&x))?;
        std::slice::from_raw_parts_mut(out, dim).copy_from_slice(e.data());
        Ok(())
    })
}

/// Number of feature frames `sv_logmel` produces for `num_samples`
/// samples (0 if shorter than one window).
#[no_mangle]
pub extern "C" fn sv_logmel_frames(num_samples: usize) -> usize {
    if num_samples < features::WINDOW {
        0
    } else {
        features::num_frames(num_samples)
    }
}

/// Number of mel bins per frame.
#[no_mangle]
pub extern "C" fn sv_logmel_bins() -> usize {
    NUM_MEL
}

/// Log-mel features of 16 kHz mono samples in `[-1, 1]`, written row-major
/// as `sv_logmel_bins() × frames` into `out`. `*frames_out` receives the
/// frame count.
///
/// # Safety
/// `samples` must hold `num_samples` floats, `out` `out_len` floats and
/// `frames_out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn sv_logmel(
    samples: *const f32,
    num_samples: usize,
    out: *mut f32,
    out_len: usize,
    frames_out: *mut usize,
) -> SvStatus {
    guard(|| {
        non_null(frames_out, "frames_out")?;
        non_null(out, "out")?;
        let s = slice(samples, num_samples, "samples")?.to_vec();
        let audio = lib(AudioSegment::new(s, "", ""))?;
        let f = lib(features::logmel(&audio))?;
        if out_len < f.numel() {
            return Err(fail(
                SvStatus::BufferTooSmall,
                format!("out holds {out_len} floats, need {}", f.numel()),
            ));
        }
        std::slice::from_raw_parts_mut(out, f.numel()).copy_from_slice(f.data());
        *frames_out = f.dim(1);
        Ok(())
    })
}

/// Cosine similarity of two length-`n` vectors.
///
/// # Safety
/// `a` and `b` must hold `n` floats; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn sv_cosine(a: *const f32, b: *const f32, n: usize, out: *mut f64) -> SvStatus {
    guard(|| {
        non_null(out, "out")?;
        let (a, b) = (slice(a, n, "a")?, slice(b, n, "b")?);
        *out = lib(metrics::cosine_score(a, b))?;
        Ok(())
    })
}

/// Equal error rate in `[0, 1]`.
///
/// # Safety
/// `target` and `nontarget` must hold `num_target` and `num_nontarget`
/// doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn sv_eer(
    target: *const f64,
    num_target: usize,
    nontarget: *const f64,
    num_nontarget: usize,
    out: *mut f64,
) -> SvStatus {
    guard(|| {
        non_null(out, "out")?;
        let t = slice(target, num_target, "target")?;
        let n = slice(nontarget, num_nontarget, "nontarget")?;
        *out = lib(metrics::eer(t, n))?;
        Ok(())
    })
}

/// Normalized minimum detection cost.
///
/// # Safety
/// As for `sv_eer`.
#[no_mangle]
pub unsafe extern "C" fn sv_min_dcf(
    target: *const f64,
    num_target: usize,
    nontarget: *const f64,
    num_nontarget: usize,
    p_target: f64,
    cost_miss: f64,
    cost_fa: f64,
    out: *mut f64,
) -> SvStatus {
    guard(|| {
        non_null(out, "out")?;
        let t = slice(target, num_target, "target")?;
        let n = slice(nontarget, num_nontarget, "nontarget")?;
        let p = DcfParams {
            p_target,
            cost_miss,
            cost_fa,
        };
        *out = lib(metrics::min_dcf(t, n, &p))?;
        Ok(())
    })
}

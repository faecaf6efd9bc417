//! C ABI over `refseg`: opaque model and dataset handles, status codes and
//! a thread-local last-error message.
//!
//! Every function returns a [`RefsegStatus`]; outputs go through pointer
//! arguments. Handles are created by `*_load`/`*_new`/`*_generate` and must
//! be released with the matching `*_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::slice;

use refseg::checkpoint::{self, CheckpointError};
use refseg::config::Config;
use refseg::data::{self, FormatError, VideoSample};
use refseg::eval;
use refseg::model::{self, ExpressionInput, Model};
use refseg::training::ModalityMode;

/// Result of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefsegStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Runtime = 5,
    Panic = 6,
}

/// Inference modality for evaluation.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefsegModality {
    TextOnly = 0,
    AudioOnly = 1,
    Both = 2,
}

/// Held-out metrics; `precision_at` is aligned with K = 0.5, 0.6, ..., 0.9.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RefsegMetrics {
    pub j: f64,
    pub f: f64,
    pub jf: f64,
    pub precision_at: [f64; 5],
    pub overall_iou: f64,
    pub mean_iou: f64,
    pub map: f64,
}

/// Opaque trained model.
pub struct RefsegModel {
    inner: Model,
}

/// Opaque list of synthetic clips.
pub struct RefsegDataset {
    inner: Vec<VideoSample>,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

struct Failure(RefsegStatus, String);

impl From<refseg::Error> for Failure {
    fn from(e: refseg::Error) -> Self {
        let status = match &e {
            refseg::Error::Format(FormatError::Io(_)) | refseg::Error::Checkpoint(CheckpointError::Io(_)) => RefsegStatus::Io,
            refseg::Error::Format(_) | refseg::Error::Checkpoint(_) => RefsegStatus::Format,
            refseg::Error::Config(_) | refseg::Error::NoExpression | refseg::Error::OutOfVocabulary { .. } => RefsegStatus::InvalidArgument,
            _ => RefsegStatus::Runtime,
        };
        Failure(status, e.to_string())
    }
}

impl From<FormatError> for Failure {
    fn from(e: FormatError) -> Self {
        refseg::Error::from(e).into()
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        refseg::Error::from(e).into()
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(RefsegStatus::InvalidArgument, msg.into())
}

/// Runs `f`, recording failures and converting panics.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> RefsegStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            RefsegStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            RefsegStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(Failure(RefsegStatus::NullArgument, "null path".into()));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| invalid("path is not UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| Failure(RefsegStatus::NullArgument, format!("null {what}")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| Failure(RefsegStatus::NullArgument, format!("null {what}")))
}

/// Optional token sequence: a null pointer means the modality is absent.
unsafe fn tokens<'a>(p: *const u32, len: usize) -> Option<&'a [u32]> {
    if p.is_null() {
        None
    } else if len == 0 {
        Some(&[])
    } else {
        Some(slice::from_raw_parts(p, len))
    }
}

/// Copies the last error message of this thread into `buf` (NUL
/// terminated, truncated to `len - 1` bytes). Returns the full message
/// length in bytes.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn refseg_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Fresh untrained model with the default configuration.
///
/// # Safety
/// `out` must be valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn refseg_model_new(seed: u64, out: *mut *mut RefsegModel) -> RefsegStatus {
    guard(|| {
        let out = out_arg(out, "output handle")?;
        *out = Box::into_raw(Box::new(RefsegModel {
            inner: Model::new(Config::default(), seed),
        }));
        Ok(())
    })
}

/// Loads a checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn refseg_model_load(path: *const c_char, out: *mut *mut RefsegModel) -> RefsegStatus {
    guard(|| {
        let path = path_arg(path)?;
        let out = out_arg(out, "output handle")?;
        let ck = checkpoint::load_checkpoint(&path)?;
        *out = Box::into_raw(Box::new(RefsegModel {
            inner: Model {
                config: ck.config,
                params: ck.params,
            },
        }));
        Ok(())
    })
}

/// Writes the model as a checkpoint.
///
/// # Safety
/// `model` must come from this library; `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn refseg_model_save(model: *const RefsegModel, path: *const c_char) -> RefsegStatus {
    guard(|| {
        let m = &deref(model, "model")?.inner;
        let path = path_arg(path)?;
        checkpoint::save_checkpoint(&path, &m.config, &m.params)?;
        Ok(())
    })
}

/// Frame size `(height, width)` the model expects.
///
/// # Safety
/// `model` must come from this library; outputs valid for writes.
#[no_mangle]
pub unsafe extern "C" fn refseg_model_frame_size(model: *const RefsegModel, height: *mut usize, width: *mut usize) -> RefsegStatus {
    guard(|| {
        let m = &deref(model, "model")?.inner;
        *out_arg(height, "height")? = m.config.data.frame_height;
        *out_arg(width, "width")? = m.config.data.frame_width;
        Ok(())
    })
}

/// # Safety
/// `model` must be null or come from this library and not be used again.
#[no_mangle]
pub unsafe extern "C" fn refseg_model_free(model: *mut RefsegModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Segments one `height x width` RGB frame (row-major, 3 bytes per pixel).
/// `text`/`audio` are token sequences; pass null to omit a modality. The
/// binary mask (0 or 1 per pixel) is written to `mask_out`, which must hold
/// `height * width` bytes.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn refseg_segment(
    model: *const RefsegModel,
    frame: *const u8,
    height: usize,
    width: usize,
    text: *const u32,
    text_len: usize,
    audio: *const u32,
    audio_len: usize,
    mask_out: *mut u8,
    mask_len: usize,
) -> RefsegStatus {
    guard(|| {
        let m = &deref(model, "model")?.inner;
        if frame.is_null() || mask_out.is_null() {
            return Err(Failure(RefsegStatus::NullArgument, "null frame or mask buffer".into()));
        }
        let (h, w) = (m.config.data.frame_height, m.config.data.frame_width);
        if (height, width) != (h, w) {
            return Err(invalid(format!("frame is {height}x{width}, model expects {h}x{w}")));
        }
        if mask_len < h * w {
            return Err(invalid(format!("mask buffer holds {mask_len} bytes, need {}", h * w)));
        }
        let pixels = slice::from_raw_parts(frame, h * w * 3);
        let input = ExpressionInput {
            text: tokens(text, text_len),
            audio: tokens(audio, audio_len),
        };
        let p = model::predict_frame(m, pixels, input)?;
        let out = slice::from_raw_parts_mut(mask_out, h * w);
        for (o, &b) in out.iter_mut().zip(&p.mask.bits) {
            *o = b as u8;
        }
        Ok(())
    })
}

/// Generates `scenes` synthetic clips with the default configuration.
///
/// # Safety
/// `out` must be valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn refseg_dataset_generate(scenes: usize, seed: u64, out: *mut *mut RefsegDataset) -> RefsegStatus {
    guard(|| {
        let out = out_arg(out, "output handle")?;
        let mut cfg = Config::default().data;
        cfg.scenes = scenes;
        let ds = data::generate_dataset(&cfg, seed).map_err(refseg::Error::from)?;
        *out = Box::into_raw(Box::new(RefsegDataset { inner: ds }));
        Ok(())
    })
}

/// # Safety
/// `path` must be NUL-terminated; `out` valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn refseg_dataset_load(path: *const c_char, out: *mut *mut RefsegDataset) -> RefsegStatus {
    guard(|| {
        let path = path_arg(path)?;
        let out = out_arg(out, "output handle")?;
        let ds = data::load_dataset(&path)?;
        *out = Box::into_raw(Box::new(RefsegDataset { inner: ds }));
        Ok(())
    })
}

/// # Safety
/// `ds` must come from this library; `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn refseg_dataset_save(ds: *const RefsegDataset, path: *const c_char) -> RefsegStatus {
    guard(|| {
        let d = &deref(ds, "dataset")?.inner;
        let path = path_arg(path)?;
        data::save_dataset(&path, d)?;
        Ok(())
    })
}

/// Number of clips.
///
/// # Safety
/// `ds` must come from this library; `len` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn refseg_dataset_len(ds: *const RefsegDataset, len: *mut usize) -> RefsegStatus {
    guard(|| {
        *out_arg(len, "length")? = deref(ds, "dataset")?.inner.len();
        Ok(())
    })
}

/// # Safety
/// `ds` must be null or come from this library and not be used again.
#[no_mangle]
pub unsafe extern "C" fn refseg_dataset_free(ds: *mut RefsegDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Evaluates `model` on the last `holdout` clips of `ds` (all clips when
/// `holdout` is 0).
///
/// # Safety
/// Handles must come from this library; `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn refseg_evaluate(
    model: *const RefsegModel,
    ds: *const RefsegDataset,
    holdout: usize,
    modality: RefsegModality,
    out: *mut RefsegMetrics,
) -> RefsegStatus {
    guard(|| {
        let m = &deref(model, "model")?.inner;
        let d = &deref(ds, "dataset")?.inner;
        let out = out_arg(out, "metrics")?;
        let samples = if holdout == 0 { &d[..] } else { eval::split(d, holdout)?.1 };
        let mode = match modality {
            RefsegModality::TextOnly => ModalityMode::TextOnly,
            RefsegModality::AudioOnly => ModalityMode::AudioOnly,
            RefsegModality::Both => ModalityMode::Both,
        };
        let r = eval::evaluate(m, samples, mode)?;
        *out = RefsegMetrics {
            j: r.j,
            f: r.f,
            jf: r.jf,
            precision_at: r.precision_at,
            overall_iou: r.overall_iou,
            mean_iou: r.mean_iou,
            map: r.map,
        };
        Ok(())
    })
}

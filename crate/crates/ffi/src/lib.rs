//! C ABI over the `m2d` crate: load a checkpoint, extract frame and clip
//! features from 16 kHz mono audio, compute log-mel spectrograms and the
//! M2D loss.
//!
//! Every function returns an [`M2dStatus`]. On failure a message is kept per
//! thread and can be read with [`m2d_last_error`]. Output buffers are
//! caller-owned; when one is too small the call fails with
//! `M2D_STATUS_BUFFER_TOO_SMALL` and the required element count is still
//! written to the size out-parameter.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use m2d::audio::{compute_logmel, DatasetStats, MelConfig, Spectrogram};
use m2d::checkpoint::Checkpoint;
use m2d::config::{RunConfig, StatsConfig};
use m2d::networks::TargetState;
use m2d::nn::Mat;
use m2d::patching::TokenSequence;
use m2d::training::m2d_loss;
use m2d::transfer::{clip_feature, encode_chunked, FrameFeatures};
use m2d::M2dError;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum M2dStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ConfigError = 3,
    DataError = 4,
    IoError = 5,
    CorruptCheckpoint = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// Loaded encoder with its frontend settings. Opaque to C.
pub struct M2dModel {
    encoder: TargetState,
    mel: MelConfig,
    stats: DatasetStats,
    clip_frames: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &M2dError) -> M2dStatus {
    match e {
        M2dError::Config { .. } | M2dError::Tiling { .. } => M2dStatus::ConfigError,
        M2dError::Io { .. } => M2dStatus::IoError,
        M2dError::Corrupt { .. } | M2dError::CheckpointVersion { .. } | M2dError::Load(_) => {
            M2dStatus::CorruptCheckpoint
        }
        M2dError::InputTooShort { .. } | M2dError::InvalidInput(_) | M2dError::Dimension(_) | M2dError::Domain(_) => {
            M2dStatus::InvalidArgument
        }
        _ => M2dStatus::DataError,
    }
}

fn guard(f: impl FnOnce() -> Result<(), M2dStatus>) -> M2dStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            M2dStatus::Ok
        }
        Ok(Err(s)) => s,
        Err(_) => {
            set_error("internal panic");
            M2dStatus::Panic
        }
    }
}

fn fail(e: M2dError) -> M2dStatus {
    let s = status_of(&e);
    set_error(e.to_string());
    s
}

fn null(what: &str) -> M2dStatus {
    set_error(format!("{what} is null"));
    M2dStatus::NullPointer
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], M2dStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

/// Copies `data` into `out` if it fits; always reports the needed length.
unsafe fn emit(data: &[f64], out: *mut f64, capacity: usize, needed: *mut usize) -> Result<(), M2dStatus> {
    if !needed.is_null() {
        *needed = data.len();
    }
    if capacity < data.len() {
        set_error(format!("buffer holds {capacity} values, {} needed", data.len()));
        return Err(M2dStatus::BufferTooSmall);
    }
    if out.is_null() {
        return Err(null("output buffer"));
    }
    std::ptr::copy_nonoverlapping(data.as_ptr(), out, data.len());
    Ok(())
}

fn resolve_stats(cfg: &RunConfig) -> DatasetStats {
    match &cfg.stats {
        StatsConfig::Values(v) => *v,
        StatsConfig::Named(n) => DatasetStats::preset(n).unwrap_or(DatasetStats::AUDIOSET),
    }
}

impl M2dModel {
    fn frames(&self, wave: &[f64]) -> Result<FrameFeatures, M2dError> {
        let spec = compute_logmel(wave, &self.mel)?;
        let std = m2d::audio::standardize(&spec, &self.stats);
        encode_chunked(&self.encoder, &std, self.clip_frames)
    }

    fn feature_dim(&self) -> usize {
        (self.mel.n_mels / self.encoder.encoder.patch_f) * self.encoder.encoder.dim
    }
}

/// NUL-terminated version string with static lifetime.
#[no_mangle]
pub extern "C" fn m2d_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (truncated,
/// always NUL-terminated when `capacity > 0`) and returns its full length.
///
/// # Safety
/// `buf` must be valid for `capacity` bytes or null.
#[no_mangle]
pub unsafe extern "C" fn m2d_last_error(buf: *mut c_char, capacity: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && capacity > 0 {
            let n = msg.len().min(capacity - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr().cast(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Loads the online encoder of a checkpoint. The model must be released
/// with [`m2d_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn m2d_model_load(path: *const c_char, out: *mut *mut M2dModel) -> M2dStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        *out = std::ptr::null_mut();
        let p = CStr::from_ptr(path).to_str().map_err(|_| {
            set_error("path is not UTF-8");
            M2dStatus::InvalidArgument
        })?;
        let ck = Checkpoint::load(Path::new(p)).map_err(fail)?;
        let cfg = ck.config().map_err(fail)?;
        let model = M2dModel {
            encoder: TargetState::from_online(&ck.online),
            mel: cfg.mel,
            stats: resolve_stats(&cfg),
            clip_frames: cfg.clip_frames,
        };
        *out = Box::into_raw(Box::new(model));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`m2d_model_load`] and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn m2d_model_free(model: *mut M2dModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Overrides the standardization statistics (default: from the checkpoint
/// config, AudioSet values when it says `estimate`).
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn m2d_model_set_stats(model: *mut M2dModel, mean: f64, std: f64) -> M2dStatus {
    guard(|| {
        let m = model.as_mut().ok_or_else(|| null("model"))?;
        m.stats = DatasetStats::new(mean, std).map_err(|e| {
            set_error(e.to_string());
            M2dStatus::InvalidArgument
        })?;
        Ok(())
    })
}

/// Width of one frame feature (`N_F · D`) and the model's input length in frames.
///
/// # Safety
/// `model` must be a live handle; out-pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn m2d_model_info(
    model: *const M2dModel,
    feature_dim: *mut usize,
    clip_frames: *mut usize,
    sample_rate_hz: *mut u32,
) -> M2dStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if !feature_dim.is_null() {
            *feature_dim = m.feature_dim();
        }
        if !clip_frames.is_null() {
            *clip_frames = m.clip_frames;
        }
        if !sample_rate_hz.is_null() {
            *sample_rate_hz = m.mel.sample_rate_hz;
        }
        Ok(())
    })
}

/// Frame features of a waveform, row-major `frames × feature_dim`, written
/// to `out`. `n_frames` receives the frame count and `needed` the element count.
///
/// # Safety
/// `wave` must hold `n_samples` values and `out` `capacity` values.
#[no_mangle]
pub unsafe extern "C" fn m2d_extract_frames(
    model: *const M2dModel,
    wave: *const f64,
    n_samples: usize,
    out: *mut f64,
    capacity: usize,
    n_frames: *mut usize,
    needed: *mut usize,
) -> M2dStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let w = slice(wave, n_samples, "wave")?;
        let f = m.frames(w).map_err(fail)?;
        if !n_frames.is_null() {
            *n_frames = f.n_frames();
        }
        let flat: Vec<f64> = f.data.iter().copied().collect();
        emit(&flat, out, capacity, needed)
    })
}

/// Temporal mean of the frame features: `feature_dim` values.
///
/// # Safety
/// `wave` must hold `n_samples` values and `out` `capacity` values.
#[no_mangle]
pub unsafe extern "C" fn m2d_extract_clip(
    model: *const M2dModel,
    wave: *const f64,
    n_samples: usize,
    out: *mut f64,
    capacity: usize,
    needed: *mut usize,
) -> M2dStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let w = slice(wave, n_samples, "wave")?;
        let f = m.frames(w).map_err(fail)?;
        let c = clip_feature(&f).map_err(fail)?;
        let flat: Vec<f64> = c.data.iter().copied().collect();
        emit(&flat, out, capacity, needed)
    })
}

/// Log-mel spectrogram with the default frontend (16 kHz, 25 ms / 10 ms,
/// 80 bands, 50–8000 Hz), row-major `80 × n_frames`.
///
/// # Safety
/// `wave` must hold `n_samples` values and `out` `capacity` values.
#[no_mangle]
pub unsafe extern "C" fn m2d_logmel(
    wave: *const f64,
    n_samples: usize,
    out: *mut f64,
    capacity: usize,
    n_frames: *mut usize,
    needed: *mut usize,
) -> M2dStatus {
    guard(|| {
        let w = slice(wave, n_samples, "wave")?;
        let s: Spectrogram = compute_logmel(w, &MelConfig::default()).map_err(fail)?;
        if !n_frames.is_null() {
            *n_frames = s.n_frames();
        }
        let flat: Vec<f64> = s.data.iter().copied().collect();
        emit(&flat, out, capacity, needed)
    })
}

/// Mean of `2 − 2·cos` over matching rows of two `rows × dim` matrices.
///
/// # Safety
/// `pred` and `target` must each hold `rows * dim` values; `loss` must be writable.
#[no_mangle]
pub unsafe extern "C" fn m2d_loss_value(
    pred: *const f64,
    target: *const f64,
    rows: usize,
    dim: usize,
    loss: *mut f64,
) -> M2dStatus {
    guard(|| {
        if loss.is_null() {
            return Err(null("loss"));
        }
        let n = rows.checked_mul(dim).ok_or_else(|| {
            set_error("rows * dim overflows");
            M2dStatus::InvalidArgument
        })?;
        let a = slice(pred, n, "pred")?;
        let b = slice(target, n, "target")?;
        let mk = |v: &[f64]| {
            TokenSequence::new(Mat::from_shape_vec((rows, dim), v.to_vec()).expect("sized"), (0..rows).collect())
        };
        let (za, zb) = (mk(a).map_err(fail)?, mk(b).map_err(fail)?);
        *loss = m2d_loss(&za, &zb).map_err(fail)?;
        Ok(())
    })
}

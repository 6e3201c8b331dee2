//! C ABI for the ssacl library.
//!
//! Every fallible function returns an [`SsaclStatus`]. On failure a message is
//! stored per thread and can be read with [`ssacl_last_error`]. Output buffers
//! are allocated by the caller; functions that fill one take its capacity in
//! elements and return [`SsaclStatus::BufferTooSmall`] when it does not fit.
//! Models are opaque handles released with [`ssacl_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use ssacl::audio::Waveform;
use ssacl::augment::mix_at_snr;
use ssacl::features::{FeatureConfig, FeatureExtractor};
use ssacl::harness::{run_kfold, ExperimentConfig};
use ssacl::losses::ntxent;
use ssacl::nn::{checkpoint, Model, Tensor};
use ssacl::noise::{generate_colored_noise, NoiseColor};
use ssacl::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SsaclStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    InvalidData = 4,
    ShapeMismatch = 5,
    NonFinite = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SsaclNoiseColor {
    White = 0,
    Pink = 1,
    Brown = 2,
    Blue = 3,
    Violet = 4,
    Grey = 5,
}

impl From<SsaclNoiseColor> for NoiseColor {
    fn from(c: SsaclNoiseColor) -> Self {
        match c {
            SsaclNoiseColor::White => NoiseColor::White,
            SsaclNoiseColor::Pink => NoiseColor::Pink,
            SsaclNoiseColor::Brown => NoiseColor::Brown,
            SsaclNoiseColor::Blue => NoiseColor::Blue,
            SsaclNoiseColor::Violet => NoiseColor::Violet,
            SsaclNoiseColor::Grey => NoiseColor::Grey,
        }
    }
}

/// Log-mel front-end settings.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsaclFeatureConfig {
    pub nfft: u32,
    pub hop: u32,
    pub n_mels: u32,
    pub fmin: f64,
    pub fmax: f64,
    pub sample_rate: u32,
    pub db_floor: f64,
}

impl From<&SsaclFeatureConfig> for FeatureConfig {
    fn from(c: &SsaclFeatureConfig) -> Self {
        FeatureConfig {
            nfft: c.nfft as usize,
            hop: c.hop as usize,
            n_mels: c.n_mels as usize,
            fmin: c.fmin,
            fmax: c.fmax,
            sample_rate: c.sample_rate,
            db_floor: c.db_floor,
        }
    }
}

/// Aggregate accuracies of an experiment, as fractions.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SsaclAggregate {
    pub best_mean: f64,
    pub best_std: f64,
    pub last_mean: f64,
    pub last_std: f64,
    pub n_folds: u32,
}

/// Trained model loaded from a checkpoint.
pub struct SsaclModel {
    inner: Model<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(e: &Error) -> SsaclStatus {
    match e {
        Error::MissingFile(_) | Error::Io { .. } => SsaclStatus::Io,
        Error::UnsupportedEncoding { .. }
        | Error::EmptyAudio(_)
        | Error::Manifest { .. }
        | Error::InvalidManifest(_)
        | Error::Checkpoint(_)
        | Error::Json(_) => SsaclStatus::InvalidData,
        Error::ShapeMismatch(_) | Error::SampleRateMismatch { .. } => SsaclStatus::ShapeMismatch,
        Error::NonFinite(_) => SsaclStatus::NonFinite,
        Error::Fold { source, .. } => status_of(source),
        _ => SsaclStatus::InvalidArgument,
    }
}

struct Failure(SsaclStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn fail(status: SsaclStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

/// Runs `f`, converting errors and panics into a status plus a stored message.
fn guarded(f: impl FnOnce() -> Result<(), Failure>) -> SsaclStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            SsaclStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            SsaclStatus::Panic
        }
    }
}

/// # Safety
/// `ptr` must be null or valid for reads of `len` elements.
unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if ptr.is_null() {
        return Err(fail(SsaclStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

/// # Safety
/// `ptr` must be null or valid for writes of `len` elements.
unsafe fn slice_mut<'a, T>(ptr: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if ptr.is_null() {
        return Err(fail(SsaclStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

/// # Safety
/// `ptr` must be null or a NUL-terminated string.
unsafe fn string(ptr: *const c_char, what: &str) -> Result<String, Failure> {
    if ptr.is_null() {
        return Err(fail(SsaclStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| fail(SsaclStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

fn wave(samples: &[f32], sample_rate: u32) -> Result<Waveform, Failure> {
    Ok(Waveform::new(samples.to_vec(), sample_rate)?)
}

/// Message of the last failed call on this thread, or null. The pointer stays
/// valid until the next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn ssacl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ssacl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Default front-end settings: 22,050 Hz, 1024-point FFT, hop 230, 128 mels
/// from 50 Hz to 10 kHz, 80 dB floor.
#[no_mangle]
pub extern "C" fn ssacl_feature_config_default() -> SsaclFeatureConfig {
    let c = FeatureConfig::default();
    SsaclFeatureConfig {
        nfft: c.nfft as u32,
        hop: c.hop as u32,
        n_mels: c.n_mels as u32,
        fmin: c.fmin,
        fmax: c.fmax,
        sample_rate: c.sample_rate,
        db_floor: c.db_floor,
    }
}

/// Feature shape for a clip of `n_samples` at the configured rate.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ssacl_log_mel_shape(
    config: *const SsaclFeatureConfig,
    n_samples: usize,
    out_n_mels: *mut u32,
    out_n_frames: *mut u32,
) -> SsaclStatus {
    guarded(|| {
        let cfg = FeatureConfig::from(config.as_ref().ok_or_else(|| fail(SsaclStatus::NullPointer, "config is null"))?);
        cfg.validate()?;
        let m = slice_mut(out_n_mels, 1, "out_n_mels")?;
        let f = slice_mut(out_n_frames, 1, "out_n_frames")?;
        m[0] = cfg.n_mels as u32;
        f[0] = cfg.n_frames(n_samples) as u32;
        Ok(())
    })
}

/// Log-mel features of a mono clip already at `config->sample_rate`, written
/// row-major (`n_mels` rows of `n_frames`) into `out`.
///
/// # Safety
/// `samples` must hold `n_samples` values and `out` `out_capacity` values.
#[no_mangle]
pub unsafe extern "C" fn ssacl_log_mel(
    config: *const SsaclFeatureConfig,
    samples: *const f32,
    n_samples: usize,
    out: *mut f32,
    out_capacity: usize,
    out_n_mels: *mut u32,
    out_n_frames: *mut u32,
) -> SsaclStatus {
    guarded(|| {
        let cfg = FeatureConfig::from(config.as_ref().ok_or_else(|| fail(SsaclStatus::NullPointer, "config is null"))?);
        let rate = cfg.sample_rate;
        let w = wave(slice(samples, n_samples, "samples")?, rate)?;
        let spec = FeatureExtractor::new(cfg)?.log_mel(&w)?;
        slice_mut(out_n_mels, 1, "out_n_mels")?[0] = spec.n_mels as u32;
        slice_mut(out_n_frames, 1, "out_n_frames")?[0] = spec.n_frames as u32;
        if spec.values.len() > out_capacity {
            return Err(fail(
                SsaclStatus::BufferTooSmall,
                format!("need {} floats, got {out_capacity}", spec.values.len()),
            ));
        }
        slice_mut(out, spec.values.len(), "out")?.copy_from_slice(&spec.values);
        Ok(())
    })
}

/// Unit-RMS colored noise, deterministic in its arguments.
///
/// # Safety
/// `out` must hold `n_samples` values.
#[no_mangle]
pub unsafe extern "C" fn ssacl_colored_noise(
    color: SsaclNoiseColor,
    n_samples: usize,
    sample_rate: u32,
    seed: u64,
    out: *mut f32,
) -> SsaclStatus {
    guarded(|| {
        let out = slice_mut(out, n_samples, "out")?;
        let w = generate_colored_noise(color.into(), n_samples, sample_rate, seed)?;
        out.copy_from_slice(&w.samples);
        Ok(())
    })
}

/// `signal + g * interferer` with `g` chosen so the RMS ratio is `snr_db`.
///
/// # Safety
/// `signal`, `interferer` and `out` must each hold `n_samples` values.
#[no_mangle]
pub unsafe extern "C" fn ssacl_mix_at_snr(
    signal: *const f32,
    interferer: *const f32,
    n_samples: usize,
    sample_rate: u32,
    snr_db: f64,
    out: *mut f32,
) -> SsaclStatus {
    guarded(|| {
        let s = wave(slice(signal, n_samples, "signal")?, sample_rate)?;
        let i = wave(slice(interferer, n_samples, "interferer")?, sample_rate)?;
        let mixed = mix_at_snr(&s, &i, snr_db)?;
        slice_mut(out, n_samples, "out")?.copy_from_slice(&mixed.samples);
        Ok(())
    })
}

/// NT-Xent over `batch` pairs of unit rows of width `dim`. Gradient outputs
/// may be null.
///
/// # Safety
/// `z` and `z_aug` must hold `batch * dim` values, as must non-null gradient
/// buffers; `out_loss` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ssacl_ntxent(
    z: *const f64,
    z_aug: *const f64,
    batch: usize,
    dim: usize,
    tau: f64,
    out_loss: *mut f64,
    out_grad_z: *mut f64,
    out_grad_z_aug: *mut f64,
) -> SsaclStatus {
    guarded(|| {
        let n = batch * dim;
        let a = Tensor::new(vec![batch, dim], slice(z, n, "z")?.to_vec())?;
        let b = Tensor::new(vec![batch, dim], slice(z_aug, n, "z_aug")?.to_vec())?;
        let r = ntxent(&a, &b, tau)?;
        slice_mut(out_loss, 1, "out_loss")?[0] = r.loss;
        if !out_grad_z.is_null() {
            slice_mut(out_grad_z, n, "out_grad_z")?.copy_from_slice(&r.grad_z.values);
        }
        if !out_grad_z_aug.is_null() {
            slice_mut(out_grad_z_aug, n, "out_grad_z_aug")?.copy_from_slice(&r.grad_z_aug.values);
        }
        Ok(())
    })
}

/// Loads a checkpoint. On success `*out_model` owns a handle that must be
/// released with [`ssacl_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out_model` valid.
#[no_mangle]
pub unsafe extern "C" fn ssacl_model_load(path: *const c_char, out_model: *mut *mut SsaclModel) -> SsaclStatus {
    guarded(|| {
        let path = string(path, "path")?;
        let slot = slice_mut(out_model, 1, "out_model")?;
        let inner = checkpoint::load::<f32>(PathBuf::from(path))?;
        slot[0] = Box::into_raw(Box::new(SsaclModel { inner }));
        Ok(())
    })
}

/// Releases a model handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle from [`ssacl_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ssacl_model_free(model: *mut SsaclModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of target classes, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ssacl_model_n_classes(model: *const SsaclModel) -> u32 {
    model.as_ref().map_or(0, |m| m.inner.config.n_classes as u32)
}

/// Width of the projection embedding, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ssacl_model_projection_dim(model: *const SsaclModel) -> u32 {
    model.as_ref().map_or(0, |m| m.inner.config.projection_dim as u32)
}

unsafe fn run_model(
    model: *const SsaclModel,
    features: *const f32,
    batch: usize,
    n_mels: usize,
    n_frames: usize,
    out: *mut f32,
    out_capacity: usize,
    project: bool,
) -> SsaclStatus {
    guarded(|| {
        let m = &model
            .as_ref()
            .ok_or_else(|| fail(SsaclStatus::NullPointer, "model is null"))?
            .inner;
        let n = batch * n_mels * n_frames;
        let x = Tensor::new(vec![batch, n_mels, n_frames], slice(features, n, "features")?.to_vec())?;
        let y = if project { m.project(&x)? } else { m.classify(&x)? };
        if y.len() > out_capacity {
            return Err(fail(
                SsaclStatus::BufferTooSmall,
                format!("need {} floats, got {out_capacity}", y.len()),
            ));
        }
        slice_mut(out, y.len(), "out")?.copy_from_slice(&y.values);
        Ok(())
    })
}

/// Eval-mode logits, `batch` rows of `n_classes`.
///
/// # Safety
/// `features` must hold `batch * n_mels * n_frames` values and `out`
/// `out_capacity` values.
#[no_mangle]
pub unsafe extern "C" fn ssacl_model_classify(
    model: *const SsaclModel,
    features: *const f32,
    batch: usize,
    n_mels: usize,
    n_frames: usize,
    out: *mut f32,
    out_capacity: usize,
) -> SsaclStatus {
    run_model(model, features, batch, n_mels, n_frames, out, out_capacity, false)
}

/// Eval-mode unit-norm embeddings, `batch` rows of the projection width.
///
/// # Safety
/// As for [`ssacl_model_classify`].
#[no_mangle]
pub unsafe extern "C" fn ssacl_model_project(
    model: *const SsaclModel,
    features: *const f32,
    batch: usize,
    n_mels: usize,
    n_frames: usize,
    out: *mut f32,
    out_capacity: usize,
) -> SsaclStatus {
    run_model(model, features, batch, n_mels, n_frames, out, out_capacity, true)
}

/// Runs a k-fold experiment from a TOML config, writing its report files.
/// `mode` may be null to keep the configured mode; `fold` 0 runs every fold;
/// `seed` may be null to keep the configured seed.
///
/// # Safety
/// `config_path` must be a NUL-terminated string, `mode` null or one, `seed`
/// null or valid, and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn ssacl_train(
    config_path: *const c_char,
    mode: *const c_char,
    fold: u32,
    seed: *const u64,
    out: *mut SsaclAggregate,
) -> SsaclStatus {
    guarded(|| {
        let mut cfg = ExperimentConfig::load(string(config_path, "config_path")?)?;
        if !mode.is_null() {
            cfg.ablation_mode = string(mode, "mode")?.parse()?;
        }
        if fold > 0 {
            cfg.folds = vec![fold];
        }
        if let Some(&s) = seed.as_ref() {
            cfg.seed = s;
        }
        let out = slice_mut(out, 1, "out")?;
        let report = run_kfold(&cfg)?;
        let a = &report.aggregate;
        out[0] = SsaclAggregate {
            best_mean: a.best.mean,
            best_std: a.best.std,
            last_mean: a.last.mean,
            last_std: a.last.std,
            n_folds: report.folds.len() as u32,
        };
        Ok(())
    })
}

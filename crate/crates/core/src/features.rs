//! Log-mel front end: centered Hann STFT, HTK mel filterbank, dB scaling with a
//! per-clip floor, and the on-disk feature cache format.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::error::{Error, Result};

/// Added to mel power before taking the logarithm.
pub const POWER_EPSILON: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub nfft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub sample_rate: u32,
    /// Floor relative to the per-clip maximum, in dB (negative).
    pub db_floor: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            nfft: 1024,
            hop: 230,
            n_mels: 128,
            fmin: 50.0,
            fmax: 10_000.0,
            sample_rate: 22_050,
            db_floor: -80.0,
        }
    }
}

impl FeatureConfig {
    pub fn n_bins(&self) -> usize {
        self.nfft / 2 + 1
    }

    /// Frames produced for a clip of `len` samples.
    pub fn n_frames(&self, len: usize) -> usize {
        len.div_ceil(self.hop)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.nfft < 2 || self.nfft % 2 != 0 {
            return bad(format!("nfft must be even and >= 2, got {}", self.nfft));
        }
        if self.hop == 0 || self.hop > self.nfft {
            return bad(format!("hop must be in 1..=nfft, got {}", self.hop));
        }
        if self.n_mels == 0 {
            return bad("n_mels must be at least 1".into());
        }
        if self.sample_rate == 0 {
            return bad("sample_rate must be positive".into());
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        if !(self.fmin >= 0.0 && self.fmin < self.fmax && self.fmax <= nyquist) {
            return bad(format!(
                "need 0 <= fmin < fmax <= {nyquist} Hz, got fmin={} fmax={}",
                self.fmin, self.fmax
            ));
        }
        if !(self.db_floor < 0.0) {
            return bad(format!("db_floor must be negative, got {}", self.db_floor));
        }
        let fb = build_mel_filterbank(self);
        if let Some(row) = (0..self.n_mels).find(|&m| fb.row(m).iter().all(|&v| v == 0.0)) {
            return bad(format!(
                "mel filter {row} covers no FFT bin; raise nfft or lower n_mels"
            ));
        }
        Ok(())
    }
}

/// Triangular filters, `n_mels` rows by `nfft/2 + 1` columns, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    pub n_mels: usize,
    pub n_bins: usize,
    pub weights: Vec<f64>,
    /// Centre frequency of each filter in Hz.
    pub centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.n_bins..(m + 1) * self.n_bins]
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// HTK-scale filterbank with peak-normalized triangles. Filter edges are
/// spaced uniformly in mel between `fmin` and `fmax`, so bins outside that
/// band get zero weight.
pub fn build_mel_filterbank(cfg: &FeatureConfig) -> MelFilterbank {
    let n_bins = cfg.n_bins();
    let lo = hz_to_mel(cfg.fmin);
    let hi = hz_to_mel(cfg.fmax);
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = cfg.sample_rate as f64 / cfg.nfft as f64;

    let mut weights = vec![0.0; cfg.n_mels * n_bins];
    for m in 0..cfg.n_mels {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        let row = &mut weights[m * n_bins..(m + 1) * n_bins];
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f64 * bin_hz;
            *w = if f > left && f <= center {
                (f - left) / (center - left)
            } else if f > center && f < right {
                (right - f) / (right - center)
            } else {
                0.0
            };
        }
    }
    MelFilterbank {
        n_mels: cfg.n_mels,
        n_bins,
        weights,
        centers_hz: edges[1..=cfg.n_mels].to_vec(),
    }
}

/// Magnitude STFT, `nfft/2 + 1` rows by `n_frames` columns, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub n_bins: usize,
    pub n_frames: usize,
    pub values: Vec<f64>,
}

impl Spectrogram {
    pub fn at(&self, bin: usize, frame: usize) -> f64 {
        self.values[bin * self.n_frames + frame]
    }
}

/// dB-scale log-mel features, `n_mels` rows by `n_frames` columns, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub n_mels: usize,
    pub n_frames: usize,
    pub values: Vec<f32>,
    pub frame_rate: f64,
}

impl MelSpectrogram {
    pub fn at(&self, mel: usize, frame: usize) -> f32 {
        self.values[mel * self.n_frames + frame]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_mels, self.n_frames)
    }
}

/// Reusable feature extractor: the FFT plan, window and filterbank are built
/// once and shared read-only.
#[derive(Clone)]
pub struct FeatureExtractor {
    cfg: FeatureConfig,
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    filterbank: Arc<MelFilterbank>,
}

impl std::fmt::Debug for FeatureExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FeatureExtractor")
            .field("cfg", &self.cfg)
            .finish_non_exhaustive()
    }
}

impl FeatureExtractor {
    pub fn new(cfg: FeatureConfig) -> Result<Self> {
        cfg.validate()?;
        let fft = FftPlanner::new().plan_fft_forward(cfg.nfft);
        // Periodic Hann.
        let window = (0..cfg.nfft)
            .map(|n| {
                0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / cfg.nfft as f64).cos()
            })
            .collect();
        let filterbank = Arc::new(build_mel_filterbank(&cfg));
        Ok(Self {
            cfg,
            fft,
            window,
            filterbank,
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    pub fn stft_magnitude(&self, w: &Waveform) -> Result<Spectrogram> {
        if w.sample_rate != self.cfg.sample_rate {
            return Err(Error::SampleRateMismatch {
                expected: self.cfg.sample_rate,
                actual: w.sample_rate,
            });
        }
        let nfft = self.cfg.nfft;
        let hop = self.cfg.hop;
        let n_bins = self.cfg.n_bins();
        let n_frames = self.cfg.n_frames(w.len());
        let pad = nfft / 2;
        let len = w.len();

        let mut values = vec![0.0; n_bins * n_frames];
        let mut buf = vec![Complex::new(0.0, 0.0); nfft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        for t in 0..n_frames {
            let start = (t * hop) as i64 - pad as i64;
            for (n, slot) in buf.iter_mut().enumerate() {
                let sample = reflect_index(start + n as i64, len)
                    .map(|i| w.samples[i] as f64)
                    .unwrap_or(0.0);
                *slot = Complex::new(sample * self.window[n], 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (k, c) in buf.iter().take(n_bins).enumerate() {
                values[k * n_frames + t] = c.norm();
            }
        }
        Ok(Spectrogram {
            n_bins,
            n_frames,
            values,
        })
    }

    pub fn log_mel(&self, w: &Waveform) -> Result<MelSpectrogram> {
        let mag = self.stft_magnitude(w)?;
        let fb = &*self.filterbank;
        let n_frames = mag.n_frames;
        let mut db = vec![0.0f64; fb.n_mels * n_frames];
        let mut power = vec![0.0f64; n_frames];
        for m in 0..fb.n_mels {
            power.iter_mut().for_each(|p| *p = 0.0);
            for (k, &wt) in fb.row(m).iter().enumerate() {
                if wt == 0.0 {
                    continue;
                }
                let col = &mag.values[k * n_frames..(k + 1) * n_frames];
                for (p, &a) in power.iter_mut().zip(col) {
                    *p += wt * a * a;
                }
            }
            for (t, &p) in power.iter().enumerate() {
                db[m * n_frames + t] = 10.0 * (p + POWER_EPSILON).log10();
            }
        }
        let peak = db.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let floor = peak + self.cfg.db_floor;
        Ok(MelSpectrogram {
            n_mels: fb.n_mels,
            n_frames,
            values: db.into_iter().map(|v| v.max(floor) as f32).collect(),
            frame_rate: self.cfg.sample_rate as f64 / self.cfg.hop as f64,
        })
    }
}

/// Maps an index outside `[0, len)` back inside by mirror reflection without
/// repeating the edge sample. Returns `None` only for empty signals.
fn reflect_index(i: i64, len: usize) -> Option<usize> {
    if len == 0 {
        return None;
    }
    if len == 1 {
        return Some(0);
    }
    let period = 2 * (len as i64 - 1);
    let mut r = i.rem_euclid(period);
    if r >= len as i64 {
        r = period - r;
    }
    Some(r as usize)
}

pub fn stft_magnitude(w: &Waveform, cfg: &FeatureConfig) -> Result<Spectrogram> {
    FeatureExtractor::new(cfg.clone())?.stft_magnitude(w)
}

pub fn log_mel(w: &Waveform, cfg: &FeatureConfig) -> Result<MelSpectrogram> {
    FeatureExtractor::new(cfg.clone())?.log_mel(w)
}

pub const CACHE_MAGIC: &[u8; 8] = b"SSACLF1\0";

/// Writes the feature cache layout: 8-byte magic, u32 n_mels, u32 n_frames
/// (little-endian), then row-major f32 values.
pub fn write_feature_cache(path: impl AsRef<Path>, spec: &MelSpectrogram) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(16 + spec.values.len() * 4);
    bytes.extend_from_slice(CACHE_MAGIC);
    bytes.extend_from_slice(&(spec.n_mels as u32).to_le_bytes());
    bytes.extend_from_slice(&(spec.n_frames as u32).to_le_bytes());
    for v in &spec.values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path)
        .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    f.write_all(&bytes)
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Reads a feature cache file. `frame_rate` is not stored and comes back as 0.
pub fn read_feature_cache(path: impl AsRef<Path>) -> Result<MelSpectrogram> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let bad = |msg: &str| Error::InvalidConfig(format!("{}: {msg}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != CACHE_MAGIC {
        return Err(bad("not a feature cache file"));
    }
    let n_mels = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let n_frames = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let payload = &bytes[16..];
    if payload.len() != n_mels * n_frames * 4 {
        return Err(bad("payload length does not match header"));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(MelSpectrogram {
        n_mels,
        n_frames,
        values,
        frame_rate: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_filterbank_shape() {
        let fb = build_mel_filterbank(&FeatureConfig::default());
        assert_eq!((fb.n_mels, fb.n_bins), (128, 513));
        assert_eq!(fb.weights.len(), 128 * 513);
    }

    #[test]
    fn bins_below_fmin_are_zero() {
        let cfg = FeatureConfig::default();
        let fb = build_mel_filterbank(&cfg);
        let bin_hz = cfg.sample_rate as f64 / cfg.nfft as f64;
        for k in 0..fb.n_bins {
            let f = k as f64 * bin_hz;
            if f < cfg.fmin || f > cfg.fmax {
                assert!((0..fb.n_mels).all(|m| fb.row(m)[k] == 0.0), "bin {k} ({f} Hz)");
            }
        }
    }

    #[test]
    fn centers_increase_and_rows_are_valid() {
        let cfg = FeatureConfig::default();
        let fb = build_mel_filterbank(&cfg);
        assert!(fb.centers_hz.windows(2).all(|w| w[0] < w[1]));
        for m in 0..fb.n_mels {
            let row = fb.row(m);
            assert!(row.iter().sum::<f64>() > 0.0, "row {m} empty");
            assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        cfg.validate().unwrap();
    }

    #[test]
    fn mel_scale_round_trip() {
        for hz in [0.0, 50.0, 700.0, 10_000.0] {
            assert!((mel_to_hz(hz_to_mel(hz)) - hz).abs() < 1e-9);
        }
        assert!((hz_to_mel(700.0) - 2595.0 * 2f64.log10()).abs() < 1e-12);
    }

    #[test]
    fn frame_count_for_five_seconds() {
        assert_eq!(FeatureConfig::default().n_frames(110_250), 480);
    }

    #[test]
    fn silence_gives_zero_magnitude_and_flat_floor() {
        let cfg = FeatureConfig::default();
        let w = Waveform::zeros(110_250, cfg.sample_rate);
        let ex = FeatureExtractor::new(cfg).unwrap();
        let mag = ex.stft_magnitude(&w).unwrap();
        assert!(mag.values.iter().all(|&v| v == 0.0));
        let mel = ex.log_mel(&w).unwrap();
        assert_eq!(mel.shape(), (128, 480));
        let first = mel.values[0];
        assert!(mel.values.iter().all(|&v| v == first));
    }

    #[test]
    fn rate_mismatch_is_rejected() {
        let w = Waveform::zeros(1000, 16_000);
        assert!(matches!(
            stft_magnitude(&w, &FeatureConfig::default()).unwrap_err(),
            Error::SampleRateMismatch { .. }
        ));
    }

    #[test]
    fn invalid_configs() {
        let base = FeatureConfig::default();
        let cases = [
            FeatureConfig { hop: 2048, ..base.clone() },
            FeatureConfig { fmax: 20_000.0, ..base.clone() },
            FeatureConfig { fmin: 12_000.0, ..base.clone() },
            FeatureConfig { n_mels: 0, ..base.clone() },
            FeatureConfig { n_mels: 1000, ..base.clone() },
        ];
        for c in cases {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn reflect_indexing() {
        let got: Vec<_> = (-3..6).map(|i| reflect_index(i, 4).unwrap()).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1]);
        assert_eq!(reflect_index(-5, 1), Some(0));
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        let spec = MelSpectrogram {
            n_mels: 2,
            n_frames: 3,
            values: vec![1.0, -2.0, 3.5, 0.0, -80.0, 7.25],
            frame_rate: 0.0,
        };
        write_feature_cache(&path, &spec).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], b"SSACLF1\0");
        assert_eq!(&bytes[8..16], &[2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(bytes.len(), 16 + 24);
        assert_eq!(read_feature_cache(&path).unwrap(), spec);
    }
}

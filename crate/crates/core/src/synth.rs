//! Synthetic toy corpus: ten target classes of tones and chirps (labeled,
//! split into folds) and forty disjoint unlabeled classes (amplitude-modulated
//! tones, harmonic stacks, band-noise bursts and click trains). Every target
//! clip carries a random-onset event over an interfering background so that
//! invariance to mixtures is worth learning.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{rms, write_wav, Waveform};
use crate::error::{Error, Result};
use crate::harness::ExperimentConfig;
use crate::manifest::{write_manifest, ManifestEntry};
use crate::noise::{generate_colored_noise, NoiseColor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub sample_rate: u32,
    pub clips_per_target_class: usize,
    pub clips_per_unlabeled_class: usize,
    pub n_folds: u32,
    pub min_secs: f64,
    pub max_secs: f64,
    /// Event-to-background interferer ratio range, dB.
    pub interferer_snr_db: (f64, f64),
    /// Event-to-noise ratio range, dB.
    pub noise_snr_db: (f64, f64),
    /// Relative spread of each class's frequencies.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            sample_rate: 8000,
            clips_per_target_class: 10,
            clips_per_unlabeled_class: 5,
            n_folds: 5,
            min_secs: 0.6,
            max_secs: 1.0,
            interferer_snr_db: (0.0, 12.0),
            noise_snr_db: (6.0, 24.0),
            jitter: 0.06,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate < 4000
            || self.clips_per_target_class == 0
            || self.clips_per_unlabeled_class == 0
            || self.n_folds == 0
            || !(self.min_secs > 0.1 && self.min_secs <= self.max_secs)
            || !(0.0..0.5).contains(&self.jitter)
        {
            return Err(Error::InvalidConfig(format!("invalid synth settings {self:?}")));
        }
        Ok(())
    }
}

/// Event family of one class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Family {
    /// Tone with two harmonics at `f` Hz.
    Tone(f64),
    /// Linear sweep from the first to the second frequency.
    Chirp(f64, f64),
    /// Carrier at `f` Hz modulated at `rate` Hz.
    Am { carrier: f64, rate: f64 },
    /// Eight harmonics of `f0`.
    Harmonic(f64),
    /// Twenty random partials inside `[lo, hi]` Hz.
    BandNoise(f64, f64),
    /// Decaying clicks at `rate` per second.
    Clicks(f64),
}

pub fn target_classes() -> Vec<(String, Family)> {
    let tones = [350.0, 600.0, 900.0, 1300.0, 1800.0]
        .map(|f| (format!("tone_{f:.0}"), Family::Tone(f)));
    let chirps = [(300.0, 900.0), (900.0, 300.0), (1000.0, 2500.0), (2500.0, 1000.0), (500.0, 2000.0)]
        .map(|(a, b)| (format!("chirp_{a:.0}_{b:.0}"), Family::Chirp(a, b)));
    tones.into_iter().chain(chirps).collect()
}

pub fn unlabeled_classes() -> Vec<(String, Family)> {
    let mut out = Vec::with_capacity(40);
    for k in 0..10 {
        let carrier = 450.0 + 170.0 * k as f64;
        let rate = 6.0 + 2.5 * k as f64;
        out.push((format!("am_{k}"), Family::Am { carrier, rate }));
    }
    for k in 0..10 {
        let f0 = 90.0 + 17.0 * k as f64;
        out.push((format!("harmonic_{k}"), Family::Harmonic(f0)));
    }
    for k in 0..10 {
        let lo = 200.0 + 300.0 * k as f64;
        out.push((format!("band_{k}"), Family::BandNoise(lo, lo + 250.0)));
    }
    for k in 0..10 {
        out.push((format!("clicks_{k}"), Family::Clicks(4.0 + 4.0 * k as f64)));
    }
    out
}

/// Renders one event of `len` samples with a smooth attack and release.
pub fn render(family: Family, len: usize, rate: u32, jitter: f64, rng: &mut impl Rng) -> Vec<f64> {
    let sr = rate as f64;
    let mut j = |f: f64| f * (1.0 + rng.random_range(-jitter..=jitter));
    let nyq = 0.45 * sr;
    let phase = |k: f64| 2.0 * PI * k;
    let mut out = vec![0.0; len];
    match family {
        Family::Tone(f) => {
            let f = j(f);
            for (n, y) in out.iter_mut().enumerate() {
                let t = n as f64 / sr;
                *y = (phase(f * t)).sin() + 0.4 * (phase(2.0 * f * t)).sin() + 0.2 * (phase(3.0 * f * t)).sin();
            }
        }
        Family::Chirp(a, b) => {
            let (a, b) = (j(a), j(b));
            let dur = len as f64 / sr;
            for (n, y) in out.iter_mut().enumerate() {
                let t = n as f64 / sr;
                *y = phase(a * t + 0.5 * (b - a) / dur * t * t).sin();
            }
        }
        Family::Am { carrier, rate: am } => {
            let (c, m) = (j(carrier), j(am));
            for (n, y) in out.iter_mut().enumerate() {
                let t = n as f64 / sr;
                *y = (0.5 + 0.5 * phase(m * t).sin()) * phase(c * t).sin();
            }
        }
        Family::Harmonic(f0) => {
            let f0 = j(f0);
            for (n, y) in out.iter_mut().enumerate() {
                let t = n as f64 / sr;
                *y = (1..=8)
                    .filter(|&h| h as f64 * f0 < nyq)
                    .map(|h| phase(h as f64 * f0 * t).sin() / h as f64)
                    .sum();
            }
        }
        Family::BandNoise(lo, hi) => {
            let partials: Vec<(f64, f64)> = (0..20)
                .map(|_| (rng.random_range(lo..hi).min(nyq), rng.random_range(0.0..2.0 * PI)))
                .collect();
            for (n, y) in out.iter_mut().enumerate() {
                let t = n as f64 / sr;
                *y = partials.iter().map(|&(f, p)| (phase(f * t) + p).sin()).sum();
            }
        }
        Family::Clicks(r) => {
            let period = (sr / j(r)).max(1.0) as usize;
            let start = rng.random_range(0..period);
            for (n, y) in out.iter_mut().enumerate() {
                if n >= start {
                    let since = (n - start) % period;
                    *y = (-(since as f64) / (0.002 * sr)).exp() * if since % 2 == 0 { 1.0 } else { -1.0 };
                }
            }
        }
    }
    let ramp = (0.01 * sr) as usize;
    for n in 0..ramp.min(len / 2) {
        let g = n as f64 / ramp as f64;
        out[n] *= g;
        out[len - 1 - n] *= g;
    }
    out
}

fn scale_to(v: &[f64], reference_rms: f64, snr_db: f64) -> Vec<f64> {
    let r = (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
    let g = if r > 0.0 { reference_rms / r * 10f64.powf(-snr_db / 20.0) } else { 0.0 };
    v.iter().map(|x| x * g).collect()
}

fn to_wave(v: &[f64], rate: u32) -> Result<Waveform> {
    let peak = v.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-12);
    let g = 0.9 / peak;
    Waveform::new(v.iter().map(|x| (x * g) as f32).collect(), rate)
}

/// A labeled target clip: an event at a random onset over a random-length
/// background of an unlabeled-family interferer plus colored noise.
pub fn target_clip(family: Family, cfg: &SynthConfig, rng: &mut impl Rng) -> Result<Waveform> {
    let sr = cfg.sample_rate as f64;
    let len = (rng.random_range(cfg.min_secs..=cfg.max_secs) * sr) as usize;
    let event_len = ((rng.random_range(0.3..=0.55) * sr) as usize).min(len);
    let onset = rng.random_range(0..=len - event_len);
    let event = render(family, event_len, cfg.sample_rate, cfg.jitter, rng);
    let event_rms = (event.iter().map(|x| x * x).sum::<f64>() / event_len as f64).sqrt();

    let bg_classes = unlabeled_classes();
    let bg_family = bg_classes[rng.random_range(0..bg_classes.len())].1;
    let bg = render(bg_family, len, cfg.sample_rate, cfg.jitter, rng);
    let bg = scale_to(&bg, event_rms, rng.random_range(cfg.interferer_snr_db.0..=cfg.interferer_snr_db.1));
    let color = NoiseColor::ALL[rng.random_range(0..NoiseColor::ALL.len())];
    let noise = generate_colored_noise(color, len, cfg.sample_rate, rng.random())?;
    let noise: Vec<f64> = noise.samples.iter().map(|&x| x as f64).collect();
    let noise = scale_to(&noise, event_rms, rng.random_range(cfg.noise_snr_db.0..=cfg.noise_snr_db.1));

    let mut mix: Vec<f64> = bg.iter().zip(&noise).map(|(a, b)| a + b).collect();
    for (k, e) in event.iter().enumerate() {
        mix[onset + k] += e;
    }
    to_wave(&mix, cfg.sample_rate)
}

/// An unlabeled clip: one event spanning most of a random-length clip over
/// light noise.
pub fn unlabeled_clip(family: Family, cfg: &SynthConfig, rng: &mut impl Rng) -> Result<Waveform> {
    let sr = cfg.sample_rate as f64;
    let len = (rng.random_range(cfg.min_secs..=cfg.max_secs) * sr) as usize;
    let ev = render(family, len, cfg.sample_rate, cfg.jitter, rng);
    let ev_rms = (ev.iter().map(|x| x * x).sum::<f64>() / len as f64).sqrt();
    let noise = generate_colored_noise(NoiseColor::Pink, len, cfg.sample_rate, rng.random())?;
    let noise: Vec<f64> = noise.samples.iter().map(|&x| x as f64).collect();
    let noise = scale_to(&noise, ev_rms, 25.0);
    let mix: Vec<f64> = ev.iter().zip(&noise).map(|(a, b)| a + b).collect();
    to_wave(&mix, cfg.sample_rate)
}

/// Paths written by [`generate_toy_corpus`].
#[derive(Debug, Clone)]
pub struct ToyCorpus {
    pub root: PathBuf,
    pub labeled_manifest: PathBuf,
    pub unlabeled_manifest: PathBuf,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
}

/// Writes WAV files under `out/audio/` and the manifests `labeled.csv` and
/// `unlabeled.csv`. The unlabeled manifest keeps its class names for auditing;
/// training strips them.
pub fn generate_toy_corpus(out: impl AsRef<Path>, cfg: &SynthConfig) -> Result<ToyCorpus> {
    cfg.validate()?;
    let root = out.as_ref().to_path_buf();
    for sub in ["audio/labeled", "audio/unlabeled"] {
        let d = root.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(format!("creating {}", d.display()), e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut labeled = Vec::new();
    for (name, family) in target_classes() {
        for i in 0..cfg.clips_per_target_class {
            let rel = PathBuf::from(format!("audio/labeled/{name}_{i:03}.wav"));
            let w = target_clip(family, cfg, &mut rng)?;
            debug_assert!(rms(&w.samples) > 0.0);
            write_wav(root.join(&rel), &w)?;
            labeled.push(ManifestEntry {
                path: rel,
                label: Some(name.clone()),
                fold: (i as u32 % cfg.n_folds) + 1,
            });
        }
    }
    let mut unlabeled = Vec::new();
    for (name, family) in unlabeled_classes() {
        for i in 0..cfg.clips_per_unlabeled_class {
            let rel = PathBuf::from(format!("audio/unlabeled/{name}_{i:03}.wav"));
            write_wav(root.join(&rel), &unlabeled_clip(family, cfg, &mut rng)?)?;
            unlabeled.push(ManifestEntry {
                path: rel,
                label: Some(name.clone()),
                fold: (i as u32 % cfg.n_folds) + 1,
            });
        }
    }
    let corpus = ToyCorpus {
        labeled_manifest: root.join("labeled.csv"),
        unlabeled_manifest: root.join("unlabeled.csv"),
        n_labeled: labeled.len(),
        n_unlabeled: unlabeled.len(),
        root,
    };
    write_manifest(&corpus.labeled_manifest, &labeled)?;
    write_manifest(&corpus.unlabeled_manifest, &unlabeled)?;
    Ok(corpus)
}

/// Experiment settings sized for the toy corpus: 1 s clips at 8 kHz and a
/// two-stage encoder, so a full five-fold run takes seconds per fold on one
/// CPU core.
pub fn toy_experiment(corpus: &ToyCorpus, output_dir: impl AsRef<Path>) -> ExperimentConfig {
    ExperimentConfig {
        name: "toy".into(),
        labeled_manifest: corpus.labeled_manifest.clone(),
        unlabeled_manifest: Some(corpus.unlabeled_manifest.clone()),
        output_dir: output_dir.as_ref().to_path_buf(),
        ..toy_settings()
    }
}

/// The toy preset without paths.
pub fn toy_settings() -> ExperimentConfig {
    ExperimentConfig {
        name: "toy".into(),
        clip_seconds: 1.0,
        sample_rate: 8000,
        nfft: 256,
        hop: 250,
        n_mels: 24,
        fmin: 50.0,
        fmax: 3800.0,
        conv_channels: vec![8, 16],
        representation_dim: 64,
        hidden_dim: 64,
        warmup_epochs: 10,
        warmup_lr: 1e-3,
        semi_lr: 1e-3,
        supervised_lr: 1e-3,
        ..ExperimentConfig::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::load_manifest;

    #[test]
    fn class_sets_are_disjoint() {
        let t: Vec<String> = target_classes().into_iter().map(|c| c.0).collect();
        let u: Vec<String> = unlabeled_classes().into_iter().map(|c| c.0).collect();
        assert_eq!((t.len(), u.len()), (10, 40));
        assert!(t.iter().all(|n| !u.contains(n)));
    }

    #[test]
    fn renders_are_finite_and_nonzero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (_, f) in target_classes().into_iter().chain(unlabeled_classes()) {
            let v = render(f, 4000, 8000, 0.05, &mut rng);
            assert!(v.iter().all(|x| x.is_finite()));
            assert!(v.iter().any(|x| x.abs() > 1e-3));
        }
    }

    #[test]
    fn small_corpus_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            clips_per_target_class: 2,
            clips_per_unlabeled_class: 1,
            n_folds: 2,
            ..SynthConfig::default()
        };
        let c = generate_toy_corpus(dir.path(), &cfg).unwrap();
        let m = load_manifest(&c.labeled_manifest).unwrap();
        assert_eq!((m.entries.len(), m.n_classes(), m.n_folds()), (20, 10, 2));
        let u = load_manifest(&c.unlabeled_manifest).unwrap();
        assert_eq!(u.entries.len(), 40);
        let w = crate::audio::load_wav(m.resolve(&m.entries[0], None)).unwrap();
        assert_eq!(w.sample_rate, 8000);
        assert!(w.duration_secs() >= 0.6 - 1e-3 && w.duration_secs() <= 1.0 + 1e-3);
    }
}

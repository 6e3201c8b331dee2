//! Batch-split mixing: the contrastive batch is shuffled, split in half, and
//! every clip is mixed with a clip from the other half at a random SNR, with
//! random time offsets and an artificial noise bed on top.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::audio::{normalize_energy, pad_or_crop, Waveform};
use crate::error::{Error, Result};
use crate::noise::{generate_colored_noise, NoiseColor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixParams {
    /// Inclusive range for the signal-to-interferer ratio, dB.
    pub source_snr_range_db: (f64, f64),
    pub noise_snr_min_db: f64,
    pub noise_snr_max_db: f64,
    /// Length of every augmented clip, in samples.
    pub target_len: usize,
}

impl MixParams {
    pub fn new(target_len: usize) -> Self {
        Self {
            source_snr_range_db: (-5.0, 20.0),
            noise_snr_min_db: 6.0,
            noise_snr_max_db: 30.0,
            target_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.source_snr_range_db;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::InvalidConfig(format!(
                "source SNR range must satisfy low <= high, got [{lo}, {hi}]"
            )));
        }
        if !(self.noise_snr_min_db.is_finite()
            && self.noise_snr_max_db.is_finite()
            && self.noise_snr_min_db < self.noise_snr_max_db)
        {
            return Err(Error::InvalidConfig(format!(
                "noise SNR range must satisfy min < max, got [{}, {}]",
                self.noise_snr_min_db, self.noise_snr_max_db
            )));
        }
        if self.target_len == 0 {
            return Err(Error::InvalidConfig("target_len must be positive".into()));
        }
        Ok(())
    }
}

/// How one augmented clip was built. Indices refer to the concatenation
/// `labeled ++ unlabeled` passed to the batch builder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixProvenance {
    /// 1 or 2.
    pub half: u8,
    pub index: usize,
    pub source: usize,
    pub signal_offset: usize,
    pub partner: Option<usize>,
    pub interferer_offset: Option<usize>,
    pub snr_db: Option<f64>,
    pub interferer_gain: Option<f64>,
    pub noise_color: Option<NoiseColor>,
    pub noise_seed: Option<u64>,
    pub noise_snr_db: Option<f64>,
    pub noise_gain: Option<f64>,
    /// Gain applied last to bring the clip to unit RMS.
    pub output_gain: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixedBatch {
    /// Un-augmented halves, each clip zero-padded (or cropped) to `target_len`
    /// from sample zero.
    pub s1: Vec<Waveform>,
    pub s2: Vec<Waveform>,
    pub s1_aug: Vec<Waveform>,
    pub s2_aug: Vec<Waveform>,
    pub provenance: Vec<MixProvenance>,
}

impl MixedBatch {
    /// Source indices of the first half, in order.
    pub fn s1_sources(&self) -> Vec<usize> {
        self.sources(1)
    }

    pub fn s2_sources(&self) -> Vec<usize> {
        self.sources(2)
    }

    fn sources(&self, half: u8) -> Vec<usize> {
        self.provenance
            .iter()
            .filter(|p| p.half == half)
            .map(|p| p.source)
            .collect()
    }

    /// One JSON object per augmented clip.
    pub fn write_provenance_jsonl(&self, mut out: impl Write) -> Result<()> {
        for p in &self.provenance {
            serde_json::to_writer(&mut out, p)?;
            out.write_all(b"\n")
                .map_err(|e| Error::io("writing provenance", e))?;
        }
        Ok(())
    }

    pub fn append_provenance_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        self.write_provenance_jsonl(std::io::BufWriter::new(file))
    }
}

/// Gain `g` such that `rms(signal) / rms(g * interferer)` is `snr_db`.
pub fn interferer_gain(signal: &Waveform, interferer: &Waveform, snr_db: f64) -> Result<f64> {
    if signal.len() != interferer.len() || signal.sample_rate != interferer.sample_rate {
        return Err(Error::ShapeMismatch(format!(
            "cannot mix {} samples @ {} Hz with {} samples @ {} Hz",
            signal.len(),
            signal.sample_rate,
            interferer.len(),
            interferer.sample_rate
        )));
    }
    let rs = signal.rms();
    let ri = interferer.rms();
    if ri == 0.0 {
        return Err(Error::DegenerateSignal("interferer has zero RMS".into()));
    }
    if rs == 0.0 {
        return Err(Error::DegenerateSignal("signal has zero RMS".into()));
    }
    Ok(rs / ri * 10f64.powf(-snr_db / 20.0))
}

/// `signal + g * interferer`, with `g` chosen so the component SNR is exactly
/// `snr_db`.
pub fn mix_at_snr(signal: &Waveform, interferer: &Waveform, snr_db: f64) -> Result<Waveform> {
    let g = interferer_gain(signal, interferer, snr_db)?;
    Ok(add_scaled(signal, interferer, g))
}

pub(crate) fn add_scaled(a: &Waveform, b: &Waveform, gain: f64) -> Waveform {
    Waveform {
        samples: a
            .samples
            .iter()
            .zip(&b.samples)
            .map(|(&x, &y)| (x as f64 + gain * y as f64) as f32)
            .collect(),
        sample_rate: a.sample_rate,
    }
}

/// Places a short clip at a uniform random offset inside a zero buffer, or
/// crops a long clip at a uniform random start. Returns the chosen offset.
pub fn random_offset_with(
    w: &Waveform,
    target_len: usize,
    rng: &mut impl Rng,
) -> Result<(Waveform, usize)> {
    let span = w.len().abs_diff(target_len);
    let offset = rng.random_range(0..=span);
    Ok((pad_or_crop(w, target_len, offset)?, offset))
}

pub fn random_offset(w: &Waveform, target_len: usize, rng: &mut impl Rng) -> Result<Waveform> {
    random_offset_with(w, target_len, rng).map(|(out, _)| out)
}

/// Which augmentation the batch builder applies to each half.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixStrategy {
    /// Offsets, cross-half mixing and a noise bed.
    Full,
    /// Random time offset only.
    OffsetOnly,
}

/// Concatenates, shuffles and splits the clips, then mixes each half against
/// the other. `s1` takes the first `ceil(n/2)` shuffled clips.
pub fn batch_split_mix(
    labeled: &[Waveform],
    unlabeled: &[Waveform],
    params: &MixParams,
    rng: &mut impl Rng,
) -> Result<MixedBatch> {
    build_batch(labeled, unlabeled, params, MixStrategy::Full, rng)
}

/// The same shuffle and split as [`batch_split_mix`], but each clip is only
/// shifted in time.
pub fn batch_split_offset_only(
    labeled: &[Waveform],
    unlabeled: &[Waveform],
    params: &MixParams,
    rng: &mut impl Rng,
) -> Result<MixedBatch> {
    build_batch(labeled, unlabeled, params, MixStrategy::OffsetOnly, rng)
}

pub fn build_batch(
    labeled: &[Waveform],
    unlabeled: &[Waveform],
    params: &MixParams,
    strategy: MixStrategy,
    rng: &mut impl Rng,
) -> Result<MixedBatch> {
    params.validate()?;
    let clips: Vec<&Waveform> = labeled.iter().chain(unlabeled).collect();
    if clips.len() < 2 {
        return Err(Error::OutOfRange(format!(
            "batch-split mixing needs at least 2 clips, got {}",
            clips.len()
        )));
    }
    let mut order: Vec<usize> = (0..clips.len()).collect();
    order.shuffle(rng);
    let (h1, h2) = order.split_at(clips.len().div_ceil(2));

    let snr = Uniform::new_inclusive(params.source_snr_range_db.0, params.source_snr_range_db.1)
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let noise_snr = Uniform::new_inclusive(params.noise_snr_min_db, params.noise_snr_max_db)
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;

    let mut provenance = Vec::with_capacity(clips.len());
    let mut augment_half = |half: u8, own: &[usize], other: &[usize]| -> Result<Vec<Waveform>> {
        let mut out = Vec::with_capacity(own.len());
        for (i, &src) in own.iter().enumerate() {
            let (shifted, signal_offset) = random_offset_with(clips[src], params.target_len, rng)?;
            let mut record = MixProvenance {
                half,
                index: i,
                source: src,
                signal_offset,
                partner: None,
                interferer_offset: None,
                snr_db: None,
                interferer_gain: None,
                noise_color: None,
                noise_seed: None,
                noise_snr_db: None,
                noise_gain: None,
                output_gain: 1.0,
            };
            let mixed = match strategy {
                MixStrategy::OffsetOnly => shifted,
                MixStrategy::Full => {
                    let partner = other[i % other.len()];
                    let (interferer, interferer_offset) =
                        random_offset_with(clips[partner], params.target_len, rng)?;
                    let snr_db = snr.sample(rng);
                    let g = interferer_gain(&shifted, &interferer, snr_db)?;
                    let with_source = add_scaled(&shifted, &interferer, g);

                    let color = NoiseColor::ALL[rng.random_range(0..NoiseColor::ALL.len())];
                    let noise_seed: u64 = rng.random();
                    let noise_snr_db = noise_snr.sample(rng);
                    let noise = generate_colored_noise(
                        color,
                        params.target_len,
                        with_source.sample_rate,
                        noise_seed,
                    )?;
                    let gn = interferer_gain(&with_source, &noise, noise_snr_db)?;

                    record.partner = Some(partner);
                    record.interferer_offset = Some(interferer_offset);
                    record.snr_db = Some(snr_db);
                    record.interferer_gain = Some(g);
                    record.noise_color = Some(color);
                    record.noise_seed = Some(noise_seed);
                    record.noise_snr_db = Some(noise_snr_db);
                    record.noise_gain = Some(gn);
                    add_scaled(&with_source, &noise, gn)
                }
            };
            record.output_gain = 1.0 / mixed.rms();
            out.push(normalize_energy(&mixed)?);
            provenance.push(record);
        }
        Ok(out)
    };
    let s1_aug = augment_half(1, h1, h2)?;
    let s2_aug = augment_half(2, h2, h1)?;

    let clean = |idx: &[usize]| -> Result<Vec<Waveform>> {
        idx.iter()
            .map(|&i| pad_or_crop(clips[i], params.target_len, 0))
            .collect()
    };
    Ok(MixedBatch {
        s1: clean(h1)?,
        s2: clean(h2)?,
        s1_aug,
        s2_aug,
        provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tone(freq: f64, len: usize, rate: u32) -> Waveform {
        let w = Waveform::new(
            (0..len)
                .map(|n| (2.0 * std::f64::consts::PI * freq * n as f64 / rate as f64).sin() as f32)
                .collect(),
            rate,
        )
        .unwrap();
        normalize_energy(&w).unwrap()
    }

    #[test]
    fn equal_rms_zero_db_gain_is_one() {
        let a = tone(100.0, 800, 8000);
        let b = tone(330.0, 800, 8000);
        let g = interferer_gain(&a, &b, 0.0).unwrap();
        assert!((g - 1.0).abs() < 1e-6);
    }

    #[test]
    fn twenty_db_gives_ratio_ten() {
        let a = tone(100.0, 800, 8000);
        let b = tone(330.0, 800, 8000);
        let g = interferer_gain(&a, &b, 20.0).unwrap();
        let scaled: f64 = b.rms() * g;
        assert!((a.rms() / scaled - 10.0).abs() < 1e-6);
    }

    #[test]
    fn silent_interferer_is_degenerate() {
        let a = tone(100.0, 800, 8000);
        let z = Waveform::zeros(800, 8000);
        assert!(matches!(
            mix_at_snr(&a, &z, 0.0).unwrap_err(),
            Error::DegenerateSignal(_)
        ));
        assert!(matches!(
            mix_at_snr(&a, &tone(1.0, 10, 8000), 0.0).unwrap_err(),
            Error::ShapeMismatch(_)
        ));
    }

    #[test]
    fn offset_of_full_length_clip_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = tone(100.0, 800, 8000);
        let (out, off) = random_offset_with(&a, 800, &mut rng).unwrap();
        assert_eq!(off, 0);
        assert_eq!(out, a);
    }

    #[test]
    fn offset_range_and_nonzero_count() {
        let rate = 8000;
        let a = tone(440.0, rate as usize, rate);
        let nonzero = a.samples.iter().filter(|&&s| s != 0.0).count();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..50 {
            let (out, off) = random_offset_with(&a, 5 * rate as usize, &mut rng).unwrap();
            assert!(off <= 4 * rate as usize);
            assert_eq!(out.len(), 5 * rate as usize);
            assert_eq!(out.samples.iter().filter(|&&s| s != 0.0).count(), nonzero);
        }
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(
            random_offset_with(&a, 40_000, &mut r1).unwrap().1,
            random_offset_with(&a, 40_000, &mut r2).unwrap().1
        );
    }

    #[test]
    fn long_clip_is_cropped() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = tone(100.0, 1000, 8000);
        let (out, off) = random_offset_with(&a, 300, &mut rng).unwrap();
        assert!(off <= 700);
        assert_eq!(out.samples, a.samples[off..off + 300]);
    }

    #[test]
    fn params_validation() {
        let mut p = MixParams::new(100);
        p.validate().unwrap();
        p.source_snr_range_db = (5.0, -5.0);
        assert!(p.validate().is_err());
        let mut p = MixParams::new(100);
        p.noise_snr_min_db = 30.0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn too_few_clips() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = tone(100.0, 100, 8000);
        let err = batch_split_mix(&[a], &[], &MixParams::new(200), &mut rng).unwrap_err();
        assert!(matches!(err, Error::OutOfRange(_)));
    }

    #[test]
    fn odd_batch_wraps_partners() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let clips: Vec<_> = (0..5).map(|i| tone(100.0 + 50.0 * i as f64, 300, 8000)).collect();
        let b = batch_split_mix(&clips[..2], &clips[2..], &MixParams::new(400), &mut rng).unwrap();
        assert_eq!((b.s1.len(), b.s2.len()), (3, 2));
        assert_eq!((b.s1_aug.len(), b.s2_aug.len()), (3, 2));
        let s2 = b.s2_sources();
        let third = b.provenance.iter().find(|p| p.half == 1 && p.index == 2).unwrap();
        assert_eq!(third.partner, Some(s2[0]));
    }

    #[test]
    fn offset_only_has_no_mixing_records() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let clips: Vec<_> = (0..4).map(|i| tone(100.0 + 50.0 * i as f64, 300, 8000)).collect();
        let b = batch_split_offset_only(&clips, &[], &MixParams::new(400), &mut rng).unwrap();
        assert!(b.provenance.iter().all(|p| p.partner.is_none() && p.noise_color.is_none()));
        for w in b.s1_aug.iter().chain(&b.s2_aug) {
            assert!((w.rms() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn provenance_jsonl_lines() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let clips: Vec<_> = (0..4).map(|i| tone(200.0 + 10.0 * i as f64, 300, 8000)).collect();
        let b = batch_split_mix(&clips, &[], &MixParams::new(300), &mut rng).unwrap();
        let mut buf = Vec::new();
        b.write_provenance_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        let v: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        for key in ["signal_offset", "interferer_offset", "snr_db", "noise_color", "noise_snr_db"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
    }
}

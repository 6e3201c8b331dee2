//! Waveform ingestion and conditioning: WAV loading, band-limited resampling,
//! energy normalization and length conditioning.

use std::path::Path;

use crate::error::{Error, Result};

/// Mono audio at a fixed sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidConfig("sample rate must be positive".into()));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Root-mean-square amplitude, accumulated in double precision.
    pub fn rms(&self) -> f64 {
        rms(&self.samples)
    }
}

pub(crate) fn rms(samples: &[f32]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let energy: f64 = samples.iter().map(|&s| (s as f64) * (s as f64)).sum();
    (energy / samples.len() as f64).sqrt()
}

/// Reads a PCM WAV file and downmixes it to mono by channel averaging.
///
/// Integer PCM (8/16/24/32-bit) is scaled to [-1, 1]; 32-bit float is taken
/// as is.
pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let unsupported = |reason: String| Error::UnsupportedEncoding {
        path: path.to_path_buf(),
        reason,
    };
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(source) => Error::io(format!("reading {}", path.display()), source),
        other => unsupported(other.to_string()),
    })?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 || spec.sample_rate == 0 {
        return Err(unsupported("zero channels or zero sample rate".into()));
    }

    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| unsupported(e.to_string()))?,
        (hound::SampleFormat::Int, bits @ (8 | 16 | 24 | 32)) => {
            let scale = 1.0 / (1u64 << (bits - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| (v as f64 * scale) as f32))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| unsupported(e.to_string()))?
        }
        (format, bits) => {
            return Err(unsupported(format!("{bits}-bit {format:?} samples")));
        }
    };

    if interleaved.len() < channels {
        return Err(Error::EmptyAudio(path.to_path_buf()));
    }
    let samples = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks_exact(channels)
            .map(|frame| {
                let sum: f64 = frame.iter().map(|&s| s as f64).sum();
                (sum / channels as f64) as f32
            })
            .collect()
    };
    Ok(Waveform {
        samples,
        sample_rate: spec.sample_rate,
    })
}

/// Writes a mono 32-bit float WAV file.
pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let to_err = |e: hound::Error| match e {
        hound::Error::IoError(source) => Error::io(format!("writing {}", path.display()), source),
        other => Error::InvalidConfig(other.to_string()),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(to_err)?;
    for &s in &w.samples {
        writer.write_sample(s).map_err(to_err)?;
    }
    writer.finalize().map_err(to_err)
}

/// Zero crossings of the sinc kernel kept on each side of the centre tap.
const SINC_ZERO_CROSSINGS: usize = 32;
const KAISER_BETA: f64 = 8.6;
/// Above this many distinct phases the polyphase table is not worth building.
const MAX_POLYPHASE_PHASES: u64 = 4096;

/// Band-limited resampling with a Kaiser-windowed sinc kernel.
///
/// The output has `round(len * target_rate / sample_rate)` samples. When the
/// rate ratio reduces to a small fraction the kernel is tabulated per phase.
pub fn resample(w: &Waveform, target_rate: u32) -> Result<Waveform> {
    if target_rate == 0 {
        return Err(Error::InvalidConfig("target sample rate must be positive".into()));
    }
    if target_rate == w.sample_rate {
        return Ok(w.clone());
    }
    let src = w.sample_rate as u64;
    let dst = target_rate as u64;
    let out_len = ((w.len() as u128 * dst as u128 + (src as u128) / 2) / src as u128) as usize;

    // Cutoff relative to the input Nyquist frequency.
    let cutoff = (dst as f64 / src as f64).min(1.0);
    let half_width = SINC_ZERO_CROSSINGS as f64 / cutoff;
    let taps = half_width.ceil() as i64;

    let g = gcd(src, dst);
    let (step_num, phases) = (src / g, dst / g);
    let kernel = |x: f64| -> f64 {
        if x.abs() >= half_width {
            return 0.0;
        }
        let r = x / half_width;
        cutoff * sinc(cutoff * x) * bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt())
            / bessel_i0(KAISER_BETA)
    };

    let x = &w.samples;
    let n_in = x.len() as i64;
    let mut out = Vec::with_capacity(out_len);

    if phases <= MAX_POLYPHASE_PHASES {
        // Output n sits at input position n * step_num / phases.
        let width = (2 * taps + 1) as usize;
        let table: Vec<Vec<f64>> = (0..phases)
            .map(|p| {
                let frac = p as f64 / phases as f64;
                (0..width)
                    .map(|j| kernel(frac - (j as i64 - taps) as f64))
                    .collect()
            })
            .collect();
        for n in 0..out_len as u64 {
            let pos = n * step_num;
            let base = (pos / phases) as i64;
            let coeffs = &table[(pos % phases) as usize];
            let lo = (base - taps).max(0);
            let hi = (base + taps).min(n_in - 1);
            let mut acc = 0.0;
            for k in lo..=hi {
                acc += x[k as usize] as f64 * coeffs[(k - base + taps) as usize];
            }
            out.push(acc as f32);
        }
    } else {
        let step = src as f64 / dst as f64;
        for n in 0..out_len {
            let t = n as f64 * step;
            let base = t.floor() as i64;
            let lo = (base - taps).max(0);
            let hi = (base + taps + 1).min(n_in - 1);
            let mut acc = 0.0;
            for k in lo..=hi {
                acc += x[k as usize] as f64 * kernel(t - k as f64);
            }
            out.push(acc as f32);
        }
    }
    Ok(Waveform {
        samples: out,
        sample_rate: target_rate,
    })
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let half = x / 2.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..64 {
        term *= (half / k as f64) * (half / k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// Scales the clip to unit RMS over its full length.
pub fn normalize_energy(w: &Waveform) -> Result<Waveform> {
    let r = w.rms();
    if r == 0.0 || !r.is_finite() {
        return Err(Error::DegenerateSignal(
            "cannot energy-normalize a silent or non-finite waveform".into(),
        ));
    }
    let gain = 1.0 / r;
    Ok(Waveform {
        samples: w.samples.iter().map(|&s| (s as f64 * gain) as f32).collect(),
        sample_rate: w.sample_rate,
    })
}

/// Zero-pads (source placed at `offset`) or crops (`[offset, offset + target_len)`)
/// to exactly `target_len` samples.
pub fn pad_or_crop(w: &Waveform, target_len: usize, offset: usize) -> Result<Waveform> {
    let len = w.len();
    let samples = if len <= target_len {
        if offset + len > target_len {
            return Err(Error::OutOfRange(format!(
                "cannot place {len} samples at offset {offset} in a buffer of {target_len}"
            )));
        }
        let mut buf = vec![0.0; target_len];
        buf[offset..offset + len].copy_from_slice(&w.samples);
        buf
    } else {
        if offset + target_len > len {
            return Err(Error::OutOfRange(format!(
                "cannot crop {target_len} samples at offset {offset} from {len}"
            )));
        }
        w.samples[offset..offset + target_len].to_vec()
    };
    Ok(Waveform {
        samples,
        sample_rate: w.sample_rate,
    })
}

/// Full conditioning chain applied to every clip before it enters the model:
/// resample, normalize to unit RMS, then zero-pad or crop to `target_len`
/// starting at sample zero.
pub fn condition(w: &Waveform, sample_rate: u32, target_len: usize) -> Result<Waveform> {
    let resampled = resample(w, sample_rate)?;
    let normalized = normalize_energy(&resampled)?;
    pad_or_crop(&normalized, target_len, 0)
}

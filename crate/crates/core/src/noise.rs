//! Colored noise by spectral shaping of white Gaussian noise.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseColor {
    White,
    Pink,
    Brown,
    Blue,
    Violet,
    Grey,
}

impl NoiseColor {
    pub const ALL: [NoiseColor; 6] = [
        NoiseColor::White,
        NoiseColor::Pink,
        NoiseColor::Brown,
        NoiseColor::Blue,
        NoiseColor::Violet,
        NoiseColor::Grey,
    ];

    /// Power spectral density exponent; `None` for grey, which follows the
    /// inverse A-weighting curve instead of a power law.
    pub fn psd_exponent(self) -> Option<f64> {
        match self {
            NoiseColor::White => Some(0.0),
            NoiseColor::Pink => Some(-1.0),
            NoiseColor::Brown => Some(-2.0),
            NoiseColor::Blue => Some(1.0),
            NoiseColor::Violet => Some(2.0),
            NoiseColor::Grey => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            NoiseColor::White => "white",
            NoiseColor::Pink => "pink",
            NoiseColor::Brown => "brown",
            NoiseColor::Blue => "blue",
            NoiseColor::Violet => "violet",
            NoiseColor::Grey => "grey",
        }
    }
}

impl fmt::Display for NoiseColor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NoiseColor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NoiseColor::ALL
            .into_iter()
            .find(|c| c.name() == s.to_ascii_lowercase() || (s == "gray" && *c == NoiseColor::Grey))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown noise color {s:?}")))
    }
}

/// Maximum boost of the grey curve, in dB.
pub const GREY_MAX_BOOST_DB: f64 = 20.0;

/// A-weighting gain in dB (0 dB at 1 kHz).
pub fn a_weighting_db(f: f64) -> f64 {
    let f2 = f * f;
    let num = 12194.0f64.powi(2) * f2 * f2;
    let den = (f2 + 20.6f64.powi(2))
        * ((f2 + 107.7f64.powi(2)) * (f2 + 737.9f64.powi(2))).sqrt()
        * (f2 + 12194.0f64.powi(2));
    20.0 * (num / den).log10() + 2.0
}

/// Magnitude response of grey noise in dB: the inverted A-weighting curve,
/// clamped at [`GREY_MAX_BOOST_DB`].
pub fn grey_gain_db(f: f64) -> f64 {
    if f <= 0.0 {
        return GREY_MAX_BOOST_DB;
    }
    (-a_weighting_db(f)).min(GREY_MAX_BOOST_DB)
}

fn magnitude_law(color: NoiseColor, f: f64) -> f64 {
    match color.psd_exponent() {
        Some(alpha) if alpha == 0.0 => 1.0,
        Some(alpha) if alpha.abs() == 1.0 => f.sqrt().powi(alpha as i32),
        Some(alpha) if alpha.abs() == 2.0 => f.powi((alpha / 2.0) as i32),
        Some(alpha) => f.powf(alpha / 2.0),
        None => 10f64.powf(grey_gain_db(f) / 20.0),
    }
}

thread_local! {
    // The planner caches plans, so repeated lengths are planned once.
    static PLANNER: std::cell::RefCell<FftPlanner<f64>> = std::cell::RefCell::new(FftPlanner::new());
}

/// Unit-RMS colored noise, deterministic in `(color, n_samples, sample_rate, seed)`.
///
/// The DC bin is always zeroed.
pub fn generate_colored_noise(
    color: NoiseColor,
    n_samples: usize,
    sample_rate: u32,
    seed: u64,
) -> Result<Waveform> {
    if n_samples < 2 {
        return Err(Error::OutOfRange(format!(
            "colored noise needs at least 2 samples, got {n_samples}"
        )));
    }
    if sample_rate == 0 {
        return Err(Error::InvalidConfig("sample rate must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spectrum: Vec<Complex<f64>> = (0..n_samples)
        .map(|_| Complex::new(StandardNormal.sample(&mut rng), 0.0))
        .collect();

    let (forward, inverse) = PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        (p.plan_fft_forward(n_samples), p.plan_fft_inverse(n_samples))
    });
    forward.process(&mut spectrum);

    let bin_hz = sample_rate as f64 / n_samples as f64;
    spectrum[0] = Complex::new(0.0, 0.0);
    for k in 1..=n_samples / 2 {
        let gain = magnitude_law(color, k as f64 * bin_hz);
        spectrum[k] *= gain;
        let mirror = n_samples - k;
        if mirror != k {
            spectrum[mirror] *= gain;
        }
    }

    inverse.process(&mut spectrum);
    let real: Vec<f64> = spectrum.iter().map(|c| c.re).collect();
    let rms = (real.iter().map(|v| v * v).sum::<f64>() / n_samples as f64).sqrt();
    if rms == 0.0 || !rms.is_finite() {
        return Err(Error::DegenerateSignal("shaped noise has zero energy".into()));
    }
    Ok(Waveform {
        samples: real.iter().map(|v| (v / rms) as f32).collect(),
        sample_rate,
    })
}

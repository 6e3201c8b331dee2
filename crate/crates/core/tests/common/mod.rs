//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::{num_complex::Complex, FftPlanner};

use ssacl::losses::{cross_entropy, ntxent};
use ssacl::nn::layers::{
    global_avg_pool, global_avg_pool_backward, l2_normalize, l2_normalize_backward, relu, relu_backward,
    BatchNorm, Conv2d, Dense,
};
use ssacl::nn::{ConvStage, EncoderConfig, Model, ModelConfig, Mode, Output, Tensor};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-3;
pub const FD_PROBES: usize = 8;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn unit_rows(b: usize, d: usize, rng: &mut impl Rng) -> Tensor<f64> {
    let mut t = random_tensor(&[b, d], rng);
    for row in t.values.chunks_mut(d) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    t
}

// ---------------------------------------------------------------------------
// NT-Xent, written straight from the definition.

/// Mean over all 2B anchors of `-log(exp(s_ap/tau) / sum_{k != a} exp(s_ak/tau))`
/// with cosine similarity `s`. Rows are normalized here, so the inputs need
/// not be unit length.
pub fn ntxent_brute(z: &[Vec<f64>], z_aug: &[Vec<f64>], tau: f64) -> f64 {
    let b = z.len();
    let all: Vec<&Vec<f64>> = z.iter().chain(z_aug).collect();
    let cos = |u: &[f64], v: &[f64]| {
        let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
        let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        dot / (nu * nv)
    };
    let mut total = 0.0;
    for a in 0..2 * b {
        let p = if a < b { a + b } else { a - b };
        let num = (cos(all[a], all[p]) / tau).exp();
        let mut den = 0.0;
        for k in 0..2 * b {
            if k != a {
                den += (cos(all[a], all[k]) / tau).exp();
            }
        }
        total += -(num / den).ln();
    }
    total / (2 * b) as f64
}

pub fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    t.values.chunks(t.shape[1]).map(<[f64]>::to_vec).collect()
}

/// Largest absolute deviation of the module from the oracle over `n` random
/// batches with B <= 8 and D <= 16.
pub fn ntxent_oracle_deviation(n: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let b = r.random_range(1..=8);
        let d = r.random_range(2..=16);
        let tau = if r.random_bool(0.3) { 0.01 } else { r.random_range(0.05..1.0) };
        let z = unit_rows(b, d, &mut r);
        let za = unit_rows(b, d, &mut r);
        let module = ntxent(&z, &za, tau).unwrap().loss;
        let oracle = ntxent_brute(&rows(&z), &rows(&za), tau);
        worst = worst.max((module - oracle).abs());
    }
    worst
}

// ---------------------------------------------------------------------------
// Finite differences.

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: String,
    pub probes: usize,
    pub max_rel_err: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.probes >= 5 && self.max_rel_err < FD_TOL
    }
}

/// The floor keeps exactly-zero gradients (a bias feeding batch norm) from
/// dividing central-difference roundoff, about 1e-11 here, by zero.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares `analytic[i]` against a central difference of `loss` for
/// `FD_PROBES` random coordinates of `values`.
fn probe(
    values: &mut [f64],
    analytic: &[f64],
    rng: &mut impl Rng,
    mut loss: impl FnMut(&[f64]) -> f64,
) -> (usize, f64) {
    let mut worst: f64 = 0.0;
    for _ in 0..FD_PROBES {
        let i = rng.random_range(0..values.len());
        let orig = values[i];
        values[i] = orig + FD_STEP;
        let up = loss(values);
        values[i] = orig - FD_STEP;
        let down = loss(values);
        values[i] = orig;
        worst = worst.max(rel_err(analytic[i], (up - down) / (2.0 * FD_STEP)));
    }
    (FD_PROBES, worst)
}

fn merge(name: &str, parts: &[(usize, f64)]) -> GradCheck {
    GradCheck {
        name: name.into(),
        probes: parts.iter().map(|p| p.0).min().unwrap_or(0),
        max_rel_err: parts.iter().map(|p| p.1).fold(0.0, f64::max),
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn check_conv2d(stride: usize, seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let mut conv = Conv2d::<f64>::new(2, 3, 3, stride, &mut r);
    conv.bias.values.iter_mut().for_each(|v| *v = r.random_range(-0.5..0.5));
    let mut x = random_tensor(&[2, 2, 5, 7], &mut r);
    let (y, cache) = conv.forward_train(&x).unwrap();
    let w = random_tensor(&y.shape, &mut r);
    let gx = conv.backward(&cache, &w, true).unwrap().unwrap();
    let gw = conv.weight.grad_or_zeros();
    let gb = conv.bias.grad_or_zeros();

    let base = conv.clone();
    let pw = {
        let mut c = base.clone();
        let mut vals = c.weight.values.clone();
        probe(&mut vals, &gw, &mut r, |v| {
            c.weight.values.copy_from_slice(v);
            dot(&c.forward_eval(&x).unwrap().values, &w.values)
        })
    };
    let pb = {
        let mut c = base.clone();
        let mut vals = c.bias.values.clone();
        probe(&mut vals, &gb, &mut r, |v| {
            c.bias.values.copy_from_slice(v);
            dot(&c.forward_eval(&x).unwrap().values, &w.values)
        })
    };
    let shape = x.shape.clone();
    let px = probe(&mut x.values, &gx.values, &mut r, |v| {
        let t = Tensor::new(shape.clone(), v.to_vec()).unwrap();
        dot(&base.forward_eval(&t).unwrap().values, &w.values)
    });
    merge(&format!("conv2d (stride {stride})"), &[pw, pb, px])
}

pub fn check_batchnorm(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let mut bn = BatchNorm::<f64>::new(3, 0.9, 1e-5);
    bn.gamma.values.iter_mut().for_each(|v| *v = r.random_range(0.5..1.5));
    bn.beta.values.iter_mut().for_each(|v| *v = r.random_range(-0.5..0.5));
    let mut x = random_tensor(&[4, 3, 2, 3], &mut r);
    let base = bn.clone();
    let (y, cache) = bn.forward_train(&x).unwrap();
    let w = random_tensor(&y.shape, &mut r);
    let gx = bn.backward(&cache, &w).unwrap();
    let gg = bn.gamma.grad_or_zeros();
    let gb = bn.beta.grad_or_zeros();

    let eval = |m: &BatchNorm<f64>, x: &Tensor<f64>| {
        let mut m = m.clone();
        dot(&m.forward_train(x).unwrap().0.values, &w.values)
    };
    let pg = {
        let mut m = base.clone();
        let mut vals = m.gamma.values.clone();
        probe(&mut vals, &gg, &mut r, |v| {
            m.gamma.values.copy_from_slice(v);
            eval(&m, &x)
        })
    };
    let pb = {
        let mut m = base.clone();
        let mut vals = m.beta.values.clone();
        probe(&mut vals, &gb, &mut r, |v| {
            m.beta.values.copy_from_slice(v);
            eval(&m, &x)
        })
    };
    let shape = x.shape.clone();
    let px = probe(&mut x.values, &gx.values, &mut r, |v| {
        eval(&base, &Tensor::new(shape.clone(), v.to_vec()).unwrap())
    });
    // Two-dimensional input, as used in the heads.
    let mut x2 = random_tensor(&[5, 3], &mut r);
    let mut bn2 = base.clone();
    let (y2, cache2) = bn2.forward_train(&x2).unwrap();
    let w2 = random_tensor(&y2.shape, &mut r);
    let gx2 = bn2.backward(&cache2, &w2).unwrap();
    let p2 = probe(&mut x2.values, &gx2.values, &mut r, |v| {
        let mut m = base.clone();
        let t = Tensor::new(vec![5, 3], v.to_vec()).unwrap();
        dot(&m.forward_train(&t).unwrap().0.values, &w2.values)
    });
    merge("batch norm", &[pg, pb, px, p2])
}

pub fn check_relu(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    // Keep inputs away from the kink.
    let mut x = random_tensor(&[3, 10], &mut r);
    x.values.iter_mut().for_each(|v| *v = v.signum() * (v.abs() + 0.05));
    let y = relu(&x);
    let w = random_tensor(&y.shape, &mut r);
    let gx = relu_backward(&y, &w).unwrap();
    let p = probe(&mut x.values, &gx.values, &mut r, |v| {
        let t = Tensor::new(vec![3, 10], v.to_vec()).unwrap();
        dot(&relu(&t).values, &w.values)
    });
    merge("relu", &[p])
}

pub fn check_global_avg_pool(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let mut x = random_tensor(&[2, 3, 4, 5], &mut r);
    let y = global_avg_pool(&x).unwrap();
    let w = random_tensor(&y.shape, &mut r);
    let gx = global_avg_pool_backward(&x.shape, &w).unwrap();
    let p = probe(&mut x.values, &gx.values, &mut r, |v| {
        let t = Tensor::new(vec![2, 3, 4, 5], v.to_vec()).unwrap();
        dot(&global_avg_pool(&t).unwrap().values, &w.values)
    });
    merge("global average pool", &[p])
}

pub fn check_dense(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let mut dense = Dense::<f64>::new(6, 4, &mut r);
    dense.bias.values.iter_mut().for_each(|v| *v = r.random_range(-0.5..0.5));
    let mut x = random_tensor(&[3, 6], &mut r);
    let base = dense.clone();
    let y = dense.forward(&x).unwrap();
    let w = random_tensor(&y.shape, &mut r);
    let gx = dense.backward(&x, &w, true).unwrap().unwrap();
    let gw = dense.weight.grad_or_zeros();
    let gb = dense.bias.grad_or_zeros();
    let pw = {
        let mut m = base.clone();
        let mut vals = m.weight.values.clone();
        probe(&mut vals, &gw, &mut r, |v| {
            m.weight.values.copy_from_slice(v);
            dot(&m.forward(&x).unwrap().values, &w.values)
        })
    };
    let pb = {
        let mut m = base.clone();
        let mut vals = m.bias.values.clone();
        probe(&mut vals, &gb, &mut r, |v| {
            m.bias.values.copy_from_slice(v);
            dot(&m.forward(&x).unwrap().values, &w.values)
        })
    };
    let px = probe(&mut x.values, &gx.values, &mut r, |v| {
        let t = Tensor::new(vec![3, 6], v.to_vec()).unwrap();
        dot(&base.forward(&t).unwrap().values, &w.values)
    });
    merge("dense", &[pw, pb, px])
}

pub fn check_l2_normalize(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let mut x = random_tensor(&[3, 5], &mut r);
    let y = l2_normalize(&x).unwrap();
    let w = random_tensor(&y.shape, &mut r);
    let gx = l2_normalize_backward(&x, &w).unwrap();
    let p = probe(&mut x.values, &gx.values, &mut r, |v| {
        let t = Tensor::new(vec![3, 5], v.to_vec()).unwrap();
        dot(&l2_normalize(&t).unwrap().values, &w.values)
    });
    merge("l2 normalize", &[p])
}

pub fn check_cross_entropy(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let mut logits = random_tensor(&[4, 5], &mut r);
    logits.values.iter_mut().for_each(|v| *v *= 3.0);
    let labels: Vec<usize> = (0..4).map(|_| r.random_range(0..5)).collect();
    let g = cross_entropy(&logits, &labels).unwrap().grad;
    let p = probe(&mut logits.values, &g.values, &mut r, |v| {
        let t = Tensor::new(vec![4, 5], v.to_vec()).unwrap();
        cross_entropy(&t, &labels).unwrap().loss
    });
    merge("cross entropy", &[p])
}

/// NT-Xent is checked through the normalization so the probes may leave the
/// unit sphere: loss(x, x') = ntxent(l2(x), l2(x')).
pub fn check_ntxent(tau: f64, seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let (b, d) = (4, 6);
    let mut x = random_tensor(&[b, d], &mut r);
    let mut xa = random_tensor(&[b, d], &mut r);
    let loss = |x: &[f64], xa: &[f64]| {
        let z = l2_normalize(&Tensor::new(vec![b, d], x.to_vec()).unwrap()).unwrap();
        let za = l2_normalize(&Tensor::new(vec![b, d], xa.to_vec()).unwrap()).unwrap();
        ntxent(&z, &za, tau).unwrap().loss
    };
    let z = l2_normalize(&x).unwrap();
    let za = l2_normalize(&xa).unwrap();
    let out = ntxent(&z, &za, tau).unwrap();
    let gx = l2_normalize_backward(&x, &out.grad_z).unwrap();
    let gxa = l2_normalize_backward(&xa, &out.grad_z_aug).unwrap();
    let fixed_a = xa.values.clone();
    let p1 = probe(&mut x.values, &gx.values, &mut r, |v| loss(v, &fixed_a));
    let fixed = x.values.clone();
    let p2 = probe(&mut xa.values, &gxa.values, &mut r, |v| loss(&fixed, v));
    merge(&format!("nt-xent (tau {tau})"), &[p1, p2])
}

pub fn tiny_model_config(n_classes: usize) -> ModelConfig {
    let mut cfg = ModelConfig::new(
        EncoderConfig {
            stages: vec![
                ConvStage { channels: 3, kernel: 3, stride: 2 },
                ConvStage { channels: 4, kernel: 3, stride: 1 },
            ],
            representation_dim: 6,
        },
        n_classes,
    );
    cfg.hidden_dim = 5;
    cfg.projection_dim = 4;
    cfg
}

/// End-to-end check of the classifier path and the projector path through a
/// small model in train mode (batch statistics).
pub fn check_model(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let model = Model::<f64>::new(tiny_model_config(3), seed).unwrap();
    let x = random_tensor(&[4, 6, 7], &mut r);
    let labels = [0usize, 2, 1, 2];
    let mut parts = Vec::new();

    let ce_loss = |m: &Model<f64>| {
        let mut m = m.clone();
        let (y, _) = m.forward(&x, Output::Logits, Mode::Train).unwrap();
        cross_entropy(&y, &labels).unwrap().loss
    };
    let w_emb = random_tensor(&[4, 4], &mut r);
    let emb_loss = |m: &Model<f64>| {
        let mut m = m.clone();
        let (y, _) = m.forward(&x, Output::Embedding, Mode::Train).unwrap();
        dot(&y.values, &w_emb.values)
    };

    for (path, output) in [("logits", Output::Logits), ("embedding", Output::Embedding)] {
        let mut m = model.clone();
        let (y, trace) = m.forward(&x, output, Mode::Train).unwrap();
        let g = match output {
            Output::Logits => cross_entropy(&y, &labels).unwrap().grad,
            _ => w_emb.clone(),
        };
        m.backward(&trace, &g).unwrap();
        let grads: Vec<(String, Vec<f64>)> =
            m.params().into_iter().map(|(n, _, t)| (n, t.grad_or_zeros())).collect();
        for (name, analytic) in grads {
            if analytic.iter().all(|&v| v == 0.0) {
                // Parameters of the other head.
                continue;
            }
            let mut probe_model = model.clone();
            let mut vals = probe_model
                .params()
                .into_iter()
                .find(|(n, _, _)| *n == name)
                .unwrap()
                .2
                .values
                .clone();
            let res = probe(&mut vals, &analytic, &mut r, |v| {
                for (n, _, t) in probe_model.params_mut() {
                    if n == name {
                        t.values.copy_from_slice(v);
                    }
                }
                match path {
                    "logits" => ce_loss(&probe_model),
                    _ => emb_loss(&probe_model),
                }
            });
            parts.push(res);
        }
    }
    merge("model (both heads)", &parts)
}

pub fn all_gradient_checks() -> Vec<GradCheck> {
    vec![
        check_conv2d(1, 1),
        check_conv2d(2, 2),
        check_batchnorm(3),
        check_relu(4),
        check_global_avg_pool(5),
        check_dense(6),
        check_l2_normalize(7),
        check_cross_entropy(8),
        check_ntxent(0.5, 9),
        check_ntxent(0.1, 10),
        check_model(11),
    ]
}

// ---------------------------------------------------------------------------
// Spectral estimation.

/// Welch estimate of the one-sided PSD (Hann, 50 % overlap), in arbitrary
/// units. Returns `(frequencies, power)` without the DC bin.
pub fn welch_psd(x: &[f64], sample_rate: f64, seg: usize) -> (Vec<f64>, Vec<f64>) {
    let fft = FftPlanner::<f64>::new().plan_fft_forward(seg);
    let window: Vec<f64> = (0..seg)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / seg as f64).cos())
        .collect();
    let mut acc = vec![0.0; seg / 2 + 1];
    let mut count = 0;
    let mut start = 0;
    while start + seg <= x.len() {
        let mut buf: Vec<Complex<f64>> =
            (0..seg).map(|n| Complex::new(x[start + n] * window[n], 0.0)).collect();
        fft.process(&mut buf);
        for (a, c) in acc.iter_mut().zip(&buf) {
            *a += c.norm_sqr();
        }
        count += 1;
        start += seg / 2;
    }
    let freqs = (1..acc.len()).map(|k| k as f64 * sample_rate / seg as f64).collect();
    let power = acc[1..].iter().map(|a| a / count as f64).collect();
    (freqs, power)
}

/// Averages PSD bins into log-spaced bands between `lo` and `hi`, returning
/// `(log10 centre frequency, band power in dB)` pairs.
pub fn log_bands(freqs: &[f64], power: &[f64], lo: f64, hi: f64, per_decade: usize) -> Vec<(f64, f64)> {
    let n_bands = ((hi / lo).log10() * per_decade as f64).round() as usize;
    let mut out = Vec::new();
    for b in 0..n_bands {
        let f0 = lo * 10f64.powf(b as f64 / per_decade as f64);
        let f1 = lo * 10f64.powf((b + 1) as f64 / per_decade as f64);
        let sel: Vec<f64> = freqs
            .iter()
            .zip(power)
            .filter(|(f, _)| **f >= f0 && **f < f1)
            .map(|(_, p)| *p)
            .collect();
        if sel.is_empty() {
            continue;
        }
        let mean = sel.iter().sum::<f64>() / sel.len() as f64;
        out.push(((f0 * f1).sqrt().log10(), 10.0 * mean.log10()));
    }
    out
}

/// Least-squares slope of `y` on `x`.
pub fn slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

pub const NOISE_RATE: u32 = 22_050;
pub const NOISE_LEN: usize = 1 << 18;

/// PSD slope in dB/decade over [100 Hz, 8 kHz], averaged over a few seeds.
pub fn measured_slope(color: ssacl::noise::NoiseColor) -> f64 {
    let seeds = [11u64, 12, 13];
    let mut total = 0.0;
    for &s in &seeds {
        let w = ssacl::noise::generate_colored_noise(color, NOISE_LEN, NOISE_RATE, s).unwrap();
        let x: Vec<f64> = w.samples.iter().map(|&v| v as f64).collect();
        let (f, p) = welch_psd(&x, NOISE_RATE as f64, 4096);
        total += slope(&log_bands(&f, &p, 100.0, 8000.0, 10));
    }
    total / seeds.len() as f64
}

/// Deviation (dB) of measured grey noise from the documented inverse-A curve
/// at `probe_hz`, after removing the best overall level offset across
/// [100 Hz, 8 kHz].
pub fn grey_deviation_db(probe_hz: f64) -> f64 {
    let w = ssacl::noise::generate_colored_noise(ssacl::noise::NoiseColor::Grey, NOISE_LEN, NOISE_RATE, 5).unwrap();
    let x: Vec<f64> = w.samples.iter().map(|&v| v as f64).collect();
    let (f, p) = welch_psd(&x, NOISE_RATE as f64, 4096);
    let bands = log_bands(&f, &p, 100.0, 8000.0, 10);
    let expected = |lf: f64| ssacl::noise::grey_gain_db(10f64.powf(lf));
    let offset = bands.iter().map(|&(lf, db)| db - expected(lf)).sum::<f64>() / bands.len() as f64;
    // Measure at the band containing the probe.
    let lp = probe_hz.log10();
    let &(_, db) = bands
        .iter()
        .min_by(|a, b| (a.0 - lp).abs().total_cmp(&(b.0 - lp).abs()))
        .unwrap();
    db - offset - expected(lp)
}

// ---------------------------------------------------------------------------
// Statistics.

/// Kolmogorov-Smirnov statistic of `samples` against U(lo, hi).
pub fn ks_uniform(samples: &[f64], lo: f64, hi: f64) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &v)| {
            let cdf = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
            (cdf - i as f64 / n).abs().max(((i + 1) as f64 / n - cdf).abs())
        })
        .fold(0.0, f64::max)
}

//! Layers with hand-written forward and backward passes.
//!
//! A train-mode forward returns a cache holding what the backward pass needs;
//! backward adds parameter gradients into the layer's tensors and, when asked,
//! returns the gradient with respect to the input.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// Kaiming-uniform values for a layer with the given fan-in.
fn kaiming_uniform<T: Scalar>(n: usize, fan_in: usize, rng: &mut impl Rng) -> Vec<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..n)
        .map(|_| T::of(rng.random_range(-bound..bound)))
        .collect()
}

fn expect_rank<T>(x: &Tensor<T>, rank: usize, what: &str) -> Result<()> {
    if x.shape.len() != rank {
        return Err(Error::ShapeMismatch(format!(
            "{what} expects a rank-{rank} input, got shape {:?}",
            x.shape
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Convolution

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    /// `[out_channels, in_channels, kernel, kernel]`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone)]
pub struct Conv2dCache<T> {
    cols: Vec<T>,
    in_shape: [usize; 4],
    out_hw: (usize, usize),
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Self {
            weight: Tensor::new(
                vec![out_channels, in_channels, kernel, kernel],
                kaiming_uniform(out_channels * fan_in, fan_in, rng),
            )
            .expect("consistent shape"),
            bias: Tensor::zeros(&[out_channels]),
            stride,
            padding: kernel / 2,
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape[2]
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel();
        (
            (h + 2 * self.padding).saturating_sub(k) / self.stride + 1,
            (w + 2 * self.padding).saturating_sub(k) / self.stride + 1,
        )
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<[usize; 4]> {
        expect_rank(x, 4, "conv2d")?;
        let s = [x.shape[0], x.shape[1], x.shape[2], x.shape[3]];
        if s[1] != self.weight.shape[1] {
            return Err(Error::ShapeMismatch(format!(
                "conv2d expects {} input channels, got {}",
                self.weight.shape[1], s[1]
            )));
        }
        if s[2] + 2 * self.padding < self.kernel() || s[3] + 2 * self.padding < self.kernel() {
            return Err(Error::ShapeMismatch(format!(
                "input {}x{} smaller than kernel {}",
                s[2],
                s[3],
                self.kernel()
            )));
        }
        Ok(s)
    }

    fn im2col(&self, x: &[T], c_in: usize, h: usize, w: usize, cols: &mut [T]) {
        let k = self.kernel();
        let (ho, wo) = self.output_hw(h, w);
        let plane = ho * wo;
        let pad = self.padding as isize;
        for c in 0..c_in {
            let xc = &x[c * h * w..(c + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = &mut cols[((c * k + ki) * k + kj) * plane..][..plane];
                    for oh in 0..ho {
                        let ih = (oh * self.stride + ki) as isize - pad;
                        let dst = &mut row[oh * wo..(oh + 1) * wo];
                        if ih < 0 || ih >= h as isize {
                            dst.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src = &xc[ih as usize * w..(ih as usize + 1) * w];
                        for (ow, d) in dst.iter_mut().enumerate() {
                            let iw = (ow * self.stride + kj) as isize - pad;
                            *d = if iw < 0 || iw >= w as isize {
                                T::zero()
                            } else {
                                src[iw as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[T], c_in: usize, h: usize, w: usize, dx: &mut [T]) {
        let k = self.kernel();
        let (ho, wo) = self.output_hw(h, w);
        let plane = ho * wo;
        let pad = self.padding as isize;
        for c in 0..c_in {
            let dxc = &mut dx[c * h * w..(c + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = &cols[((c * k + ki) * k + kj) * plane..][..plane];
                    for oh in 0..ho {
                        let ih = (oh * self.stride + ki) as isize - pad;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for ow in 0..wo {
                            let iw = (ow * self.stride + kj) as isize - pad;
                            if iw >= 0 && iw < w as isize {
                                dxc[ih as usize * w + iw as usize] += row[oh * wo + ow];
                            }
                        }
                    }
                }
            }
        }
    }

    fn forward_impl(&self, x: &Tensor<T>, keep_cols: bool) -> Result<(Tensor<T>, Option<Conv2dCache<T>>)> {
        let [b, c_in, h, w] = self.check_input(x)?;
        let c_out = self.weight.shape[0];
        let k = self.kernel();
        let (ho, wo) = self.output_hw(h, w);
        let plane = ho * wo;
        let patch = c_in * k * k;

        let mut out = vec![T::zero(); b * c_out * plane];
        let mut all_cols = if keep_cols {
            vec![T::zero(); b * patch * plane]
        } else {
            Vec::new()
        };
        let mut scratch = if keep_cols {
            Vec::new()
        } else {
            vec![T::zero(); patch * plane]
        };
        for n in 0..b {
            let xin = &x.values[n * c_in * h * w..(n + 1) * c_in * h * w];
            let cols: &mut [T] = if keep_cols {
                &mut all_cols[n * patch * plane..(n + 1) * patch * plane]
            } else {
                &mut scratch
            };
            self.im2col(xin, c_in, h, w, cols);
            let y = &mut out[n * c_out * plane..(n + 1) * c_out * plane];
            for (o, chunk) in y.chunks_exact_mut(plane).enumerate() {
                chunk.iter_mut().for_each(|v| *v = self.bias.values[o]);
            }
            gemm_acc(&self.weight.values, cols, y, c_out, patch, plane);
        }
        let y = Tensor::new(vec![b, c_out, ho, wo], out)?;
        let cache = keep_cols.then(|| Conv2dCache {
            cols: all_cols,
            in_shape: [b, c_in, h, w],
            out_hw: (ho, wo),
        });
        Ok((y, cache))
    }

    pub fn forward_train(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Conv2dCache<T>)> {
        let (y, cache) = self.forward_impl(x, true)?;
        Ok((y, cache.expect("cache requested")))
    }

    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_impl(x, false)?.0)
    }

    pub fn backward(
        &mut self,
        cache: &Conv2dCache<T>,
        grad_out: &Tensor<T>,
        need_input_grad: bool,
    ) -> Result<Option<Tensor<T>>> {
        let [b, c_in, h, w] = cache.in_shape;
        let c_out = self.weight.shape[0];
        let k = self.kernel();
        let plane = cache.out_hw.0 * cache.out_hw.1;
        let patch = c_in * k * k;
        if grad_out.shape != [b, c_out, cache.out_hw.0, cache.out_hw.1] {
            return Err(Error::ShapeMismatch(format!(
                "conv2d gradient shape {:?} does not match its output",
                grad_out.shape
            )));
        }

        let mut dw = vec![T::zero(); self.weight.len()];
        let mut db = vec![T::zero(); c_out];
        let mut dx = need_input_grad.then(|| vec![T::zero(); b * c_in * h * w]);
        let mut dcols = vec![T::zero(); if need_input_grad { patch * plane } else { 0 }];
        for n in 0..b {
            let gy = &grad_out.values[n * c_out * plane..(n + 1) * c_out * plane];
            let cols = &cache.cols[n * patch * plane..(n + 1) * patch * plane];
            gemm_nt_acc(gy, cols, &mut dw, c_out, plane, patch);
            for (o, chunk) in gy.chunks_exact(plane).enumerate() {
                db[o] += chunk.iter().copied().sum::<T>();
            }
            if let Some(dx) = dx.as_mut() {
                dcols.iter_mut().for_each(|v| *v = T::zero());
                gemm_tn_acc(&self.weight.values, gy, &mut dcols, patch, c_out, plane);
                let dxn = &mut dx[n * c_in * h * w..(n + 1) * c_in * h * w];
                self.col2im(&dcols, c_in, h, w, dxn);
            }
        }
        self.weight.accumulate_grad(&dw);
        self.bias.accumulate_grad(&db);
        dx.map(|v| Tensor::new(vec![b, c_in, h, w], v)).transpose()
    }
}

// ---------------------------------------------------------------------------
// Batch normalization

/// Normalizes over every axis except axis 1, so it serves both `(B, C)` and
/// `(B, C, H, W)` inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    shape: Vec<usize>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize, momentum: f64, eps: f64) -> Self {
        Self {
            gamma: Tensor::filled(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::filled(&[channels], T::one()),
            momentum,
            eps,
        }
    }

    fn layout(&self, x: &Tensor<T>) -> Result<(usize, usize, usize)> {
        if x.shape.len() < 2 || x.shape[1] != self.gamma.len() {
            return Err(Error::ShapeMismatch(format!(
                "batch norm over {} channels got shape {:?}",
                self.gamma.len(),
                x.shape
            )));
        }
        let spatial: usize = x.shape[2..].iter().product();
        Ok((x.shape[0], x.shape[1], spatial))
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, BatchNormCache<T>)> {
        let (b, c, s) = self.layout(x)?;
        let count = b * s;
        if count == 0 {
            return Err(Error::ShapeMismatch("batch norm over an empty batch".into()));
        }
        let n = T::of(count as f64);
        let eps = T::of(self.eps);
        let m = T::of(self.momentum);
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); c];
        for ch in 0..c {
            let idx = |bi: usize| (bi * c + ch) * s;
            let mut mean = T::zero();
            for bi in 0..b {
                mean += x.values[idx(bi)..idx(bi) + s].iter().copied().sum::<T>();
            }
            mean /= n;
            let mut var = T::zero();
            for bi in 0..b {
                for &v in &x.values[idx(bi)..idx(bi) + s] {
                    var += (v - mean) * (v - mean);
                }
            }
            var /= n;
            let istd = T::one() / (var + eps).sqrt();
            inv_std[ch] = istd;
            let (g, be) = (self.gamma.values[ch], self.beta.values[ch]);
            for bi in 0..b {
                for i in idx(bi)..idx(bi) + s {
                    let h = (x.values[i] - mean) * istd;
                    xhat[i] = h;
                    out[i] = g * h + be;
                }
            }
            let unbiased = if count > 1 {
                var * n / (n - T::one())
            } else {
                var
            };
            let rm = &mut self.running_mean.values[ch];
            *rm = m * *rm + (T::one() - m) * mean;
            let rv = &mut self.running_var.values[ch];
            *rv = m * *rv + (T::one() - m) * unbiased;
        }
        Ok((
            Tensor::new(x.shape.clone(), out)?,
            BatchNormCache {
                xhat,
                inv_std,
                shape: x.shape.clone(),
            },
        ))
    }

    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, c, s) = self.layout(x)?;
        let eps = T::of(self.eps);
        let mut out = x.values.clone();
        for ch in 0..c {
            let scale = self.gamma.values[ch] / (self.running_var.values[ch] + eps).sqrt();
            let shift = self.beta.values[ch] - self.running_mean.values[ch] * scale;
            for bi in 0..b {
                let start = (bi * c + ch) * s;
                for v in &mut out[start..start + s] {
                    *v = *v * scale + shift;
                }
            }
        }
        Tensor::new(x.shape.clone(), out)
    }

    pub fn backward(
        &mut self,
        cache: &BatchNormCache<T>,
        grad_out: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        if grad_out.shape != cache.shape {
            return Err(Error::ShapeMismatch("batch norm gradient shape".into()));
        }
        let b = cache.shape[0];
        let c = cache.shape[1];
        let s: usize = cache.shape[2..].iter().product();
        let n = T::of((b * s) as f64);
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        let mut dx = vec![T::zero(); grad_out.len()];
        for ch in 0..c {
            let range = |bi: usize| (bi * c + ch) * s..(bi * c + ch) * s + s;
            let (mut sg, mut sgx) = (T::zero(), T::zero());
            for bi in 0..b {
                for i in range(bi) {
                    sg += grad_out.values[i];
                    sgx += grad_out.values[i] * cache.xhat[i];
                }
            }
            dgamma[ch] = sgx;
            dbeta[ch] = sg;
            let k = self.gamma.values[ch] * cache.inv_std[ch] / n;
            for bi in 0..b {
                for i in range(bi) {
                    dx[i] = k * (n * grad_out.values[i] - sg - cache.xhat[i] * sgx);
                }
            }
        }
        self.gamma.accumulate_grad(&dgamma);
        self.beta.accumulate_grad(&dbeta);
        Tensor::new(cache.shape.clone(), dx)
    }
}

// ---------------------------------------------------------------------------
// Rectifier

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    Tensor {
        shape: x.shape.clone(),
        values: x.values.iter().map(|&v| v.max(T::zero())).collect(),
        grad: None,
    }
}

/// Gradient of the rectifier given its forward output.
pub fn relu_backward<T: Scalar>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if output.shape != grad_out.shape {
        return Err(Error::ShapeMismatch("relu gradient shape".into()));
    }
    Ok(Tensor {
        shape: output.shape.clone(),
        values: output
            .values
            .iter()
            .zip(&grad_out.values)
            .map(|(&y, &g)| if y > T::zero() { g } else { T::zero() })
            .collect(),
        grad: None,
    })
}

// ---------------------------------------------------------------------------
// Global average pooling

pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank(x, 4, "global average pool")?;
    let (b, c) = (x.shape[0], x.shape[1]);
    let plane = x.shape[2] * x.shape[3];
    let inv = T::one() / T::of(plane as f64);
    let values = x
        .values
        .chunks_exact(plane)
        .map(|p| p.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::new(vec![b, c], values)
}

pub fn global_avg_pool_backward<T: Scalar>(
    in_shape: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let plane = in_shape[2] * in_shape[3];
    if grad_out.shape != in_shape[..2] {
        return Err(Error::ShapeMismatch("pool gradient shape".into()));
    }
    let inv = T::one() / T::of(plane as f64);
    let values = grad_out
        .values
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g * inv, plane))
        .collect();
    Tensor::new(in_shape.to_vec(), values)
}

// ---------------------------------------------------------------------------
// Fully connected

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    /// `[in_features, out_features]`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn new(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: Tensor::new(vec![input, output], kaiming_uniform(input * output, input, rng))
                .expect("consistent shape"),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        expect_rank(x, 2, "dense")?;
        let (b, fin) = (x.shape[0], x.shape[1]);
        if fin != self.in_features() {
            return Err(Error::ShapeMismatch(format!(
                "dense expects {} features, got {fin}",
                self.in_features()
            )));
        }
        let fout = self.out_features();
        let mut out: Vec<T> = (0..b).flat_map(|_| self.bias.values.iter().copied()).collect();
        gemm_acc(&x.values, &self.weight.values, &mut out, b, fin, fout);
        Tensor::new(vec![b, fout], out)
    }

    pub fn backward(
        &mut self,
        input: &Tensor<T>,
        grad_out: &Tensor<T>,
        need_input_grad: bool,
    ) -> Result<Option<Tensor<T>>> {
        let (b, fin, fout) = (input.shape[0], self.in_features(), self.out_features());
        if grad_out.shape != [b, fout] {
            return Err(Error::ShapeMismatch("dense gradient shape".into()));
        }
        let mut dw = vec![T::zero(); fin * fout];
        gemm_tn_acc(&input.values, &grad_out.values, &mut dw, fin, b, fout);
        let mut db = vec![T::zero(); fout];
        for row in grad_out.values.chunks_exact(fout) {
            db.iter_mut().zip(row).for_each(|(d, &g)| *d += g);
        }
        self.weight.accumulate_grad(&dw);
        self.bias.accumulate_grad(&db);
        if !need_input_grad {
            return Ok(None);
        }
        let mut dx = vec![T::zero(); b * fin];
        gemm_nt_acc(&grad_out.values, &self.weight.values, &mut dx, b, fout, fin);
        Ok(Some(Tensor::new(vec![b, fin], dx)?))
    }
}

// ---------------------------------------------------------------------------
// Row-wise L2 normalization

/// Added to each row norm before dividing, so an all-zero row maps to zero.
pub const L2_NORM_EPSILON: f64 = 1e-12;

pub fn l2_normalize<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank(x, 2, "l2 normalize")?;
    let d = x.shape[1];
    let eps = T::of(L2_NORM_EPSILON);
    let mut out = x.values.clone();
    for row in out.chunks_exact_mut(d) {
        let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        let inv = T::one() / (norm + eps);
        row.iter_mut().for_each(|v| *v *= inv);
    }
    Tensor::new(x.shape.clone(), out)
}

pub fn l2_normalize_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if input.shape != grad_out.shape {
        return Err(Error::ShapeMismatch("l2 normalize gradient shape".into()));
    }
    let d = input.shape[1];
    let eps = T::of(L2_NORM_EPSILON);
    let mut dx = vec![T::zero(); input.len()];
    for ((x, g), out) in input
        .values
        .chunks_exact(d)
        .zip(grad_out.values.chunks_exact(d))
        .zip(dx.chunks_exact_mut(d))
    {
        let norm = x.iter().map(|&v| v * v).sum::<T>().sqrt();
        let denom = norm + eps;
        let dot: T = x.iter().zip(g).map(|(&a, &b)| a * b).sum();
        let radial = if norm > T::zero() {
            dot / (norm * denom * denom)
        } else {
            T::zero()
        };
        for ((o, &xi), &gi) in out.iter_mut().zip(x).zip(g) {
            *o = gi / denom - xi * radial;
        }
    }
    Tensor::new(input.shape.clone(), dx)
}

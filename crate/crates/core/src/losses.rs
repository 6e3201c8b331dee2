//! Classification and contrastive losses with analytic gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Scalar, Tensor};

/// Temperatures known to train successfully.
pub const TAU_VALIDATED_RANGE: (f64, f64) = (0.001, 0.1);

/// Row norms of NT-Xent inputs must be within this distance of 1.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub tau: f64,
    pub lambda_reg: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.01,
            lambda_reg: 0.05,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidConfig(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.lambda_reg >= 0.0 && self.lambda_reg.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "lambda_reg must be non-negative, got {}",
                self.lambda_reg
            )));
        }
        if !self.tau_in_validated_range() {
            log::warn!(
                "tau = {} is outside the validated range [{}, {}]",
                self.tau,
                TAU_VALIDATED_RANGE.0,
                TAU_VALIDATED_RANGE.1
            );
        }
        Ok(())
    }

    pub fn tau_in_validated_range(&self) -> bool {
        (TAU_VALIDATED_RANGE.0..=TAU_VALIDATED_RANGE.1).contains(&self.tau)
    }
}

/// Loss value and its gradient with respect to the logits.
#[derive(Debug, Clone)]
pub struct CrossEntropy<T> {
    pub loss: T,
    pub grad: Tensor<T>,
}

/// Mean over the batch of `-log softmax(logits)[label]`, computed with
/// max-subtraction.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<CrossEntropy<T>> {
    if logits.shape.len() != 2 || logits.shape[0] != labels.len() || labels.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "cross entropy needs (B, C) logits for {} labels, got {:?}",
            labels.len(),
            logits.shape
        )));
    }
    let (b, c) = (logits.shape[0], logits.shape[1]);
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::OutOfRange(format!("label {bad} not in [0, {c})")));
    }
    let inv_b = T::one() / T::of(b as f64);
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); b * c];
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += (log_z - row[label]) * inv_b;
        let g = &mut grad[i * c..(i + 1) * c];
        for (gk, &v) in g.iter_mut().zip(row) {
            *gk = (v - log_z).exp() * inv_b;
        }
        g[label] -= inv_b;
    }
    Ok(CrossEntropy {
        loss,
        grad: Tensor::new(vec![b, c], grad)?,
    })
}

/// NT-Xent value and gradients with respect to both inputs.
#[derive(Debug, Clone)]
pub struct NtXent<T> {
    pub loss: T,
    pub grad_z: Tensor<T>,
    pub grad_z_aug: Tensor<T>,
}

/// NT-Xent over `B` positive pairs `(z[i], z_aug[i])`.
///
/// Each of the `2B` embeddings acts as an anchor once. Its positive is its
/// partner; its negatives are the other `2(B - 1)` embeddings (every other
/// original and every other augmentation). The loss is the mean over all
/// `2B` anchors, i.e. the average of the `z`-anchored and `z_aug`-anchored
/// means. Similarity is the dot product of unit rows divided by `tau`.
pub fn ntxent<T: Scalar>(z: &Tensor<T>, z_aug: &Tensor<T>, tau: f64) -> Result<NtXent<T>> {
    if z.shape.len() != 2 || z.shape != z_aug.shape {
        return Err(Error::ShapeMismatch(format!(
            "ntxent needs two (B, D) inputs of equal shape, got {:?} and {:?}",
            z.shape, z_aug.shape
        )));
    }
    let (b, d) = (z.shape[0], z.shape[1]);
    if b == 0 {
        return Err(Error::ShapeMismatch("ntxent on an empty batch".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidConfig(format!("tau must be positive, got {tau}")));
    }
    for (which, t) in [("z", z), ("z_aug", z_aug)] {
        for i in 0..b {
            let norm = t.row(i).iter().map(|&v| v * v).sum::<T>().sqrt().as_f64();
            if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
                return Err(Error::OutOfRange(format!(
                    "{which} row {i} has norm {norm}, expected unit rows"
                )));
            }
        }
    }

    let n = 2 * b;
    let vec_of = |k: usize| if k < b { z.row(k) } else { z_aug.row(k - b) };
    let partner = |k: usize| if k < b { k + b } else { k - b };
    let inv_tau = T::of(1.0 / tau);

    let mut logits = vec![T::zero(); n * n];
    for k in 0..n {
        for m in k..n {
            let s: T = vec_of(k).iter().zip(vec_of(m)).map(|(&x, &y)| x * y).sum::<T>() * inv_tau;
            logits[k * n + m] = s;
            logits[m * n + k] = s;
        }
    }

    let scale = T::one() / T::of(n as f64);
    let mut loss = T::zero();
    // Gradient of the loss with respect to each logit entry.
    let mut d_logits = vec![T::zero(); n * n];
    for k in 0..n {
        let row = &logits[k * n..(k + 1) * n];
        let max = row
            .iter()
            .enumerate()
            .filter(|&(m, _)| m != k)
            .map(|(_, &v)| v)
            .fold(T::neg_infinity(), T::max);
        let sum: T = row
            .iter()
            .enumerate()
            .filter(|&(m, _)| m != k)
            .map(|(_, &v)| (v - max).exp())
            .sum();
        let log_z = max + sum.ln();
        let p = partner(k);
        loss += (log_z - row[p]) * scale;
        for m in (0..n).filter(|&m| m != k) {
            let mut g = (row[m] - log_z).exp();
            if m == p {
                g -= T::one();
            }
            d_logits[k * n + m] = g * scale;
        }
    }

    // logits[k][m] = v_k · v_m / tau, so both endpoints receive gradient.
    let mut grads = vec![T::zero(); n * d];
    for k in 0..n {
        for m in 0..n {
            let g = d_logits[k * n + m] * inv_tau;
            if g == T::zero() {
                continue;
            }
            let vm = vec_of(m);
            let vk = vec_of(k);
            for j in 0..d {
                grads[k * d + j] += g * vm[j];
                grads[m * d + j] += g * vk[j];
            }
        }
    }
    let grad_z_aug = grads.split_off(b * d);
    Ok(NtXent {
        loss,
        grad_z: Tensor::new(vec![b, d], grads)?,
        grad_z_aug: Tensor::new(vec![b, d], grad_z_aug)?,
    })
}

/// `l_clf + lambda_reg * (l_reg_1 + l_reg_2)`
pub fn total_loss(l_clf: f64, l_reg_1: f64, l_reg_2: f64, cfg: &LossConfig) -> f64 {
    l_clf + cfg.lambda_reg * (l_reg_1 + l_reg_2)
}

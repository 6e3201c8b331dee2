use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::model::{Model, ParamGroup};
use super::tensor::Scalar;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0)
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.eps > 0.0)
        {
            return Err(Error::InvalidConfig(format!("invalid Adam settings {self:?}")));
        }
        Ok(())
    }
}

/// Adam with bias-corrected moments. Only the parameter groups passed to
/// [`Adam::step`] are touched; tensors without a gradient are skipped.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, model: &mut Model<T>, groups: &[ParamGroup]) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let b1 = T::of(c.beta1);
        let b2 = T::of(c.beta2);
        let one = T::one();
        let correction1 = T::of(1.0 - c.beta1.powi(t));
        let correction2 = T::of(1.0 - c.beta2.powi(t));
        let lr = T::of(c.lr);
        let eps = T::of(c.eps);
        for (name, group, param) in model.params_mut() {
            if !groups.contains(&group) {
                continue;
            }
            let Some(grad) = param.grad.as_ref() else {
                continue;
            };
            let (m, v) = self
                .moments
                .entry(name)
                .or_insert_with(|| (vec![T::zero(); grad.len()], vec![T::zero(); grad.len()]));
            for (((p, &g), mi), vi) in param
                .values
                .iter_mut()
                .zip(grad)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + (one - b1) * g;
                *vi = b2 * *vi + (one - b2) * g * g;
                let m_hat = *mi / correction1;
                let v_hat = *vi / correction2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

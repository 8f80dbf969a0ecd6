//! AdamW with decoupled weight decay.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::Parameter;
use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// Parameters sharing a learning rate.
pub struct ParamGroup<'a, T: Scalar> {
    pub lr: f64,
    pub params: Vec<&'a Parameter<T>>,
}

struct Moments<T> {
    first: Vec<T>,
    second: Vec<T>,
}

pub struct AdamW<T: Scalar> {
    config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, Moments<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Names of parameters that currently hold moment buffers.
    pub fn tracked(&self) -> impl Iterator<Item = &str> + '_ {
        self.moments.keys().map(String::as_str)
    }

    /// One update over every group, then clears all gradients in the groups.
    ///
    /// Frozen parameters are skipped (their stored gradients are dropped).
    /// A trainable parameter without a gradient is a contract error, and in
    /// that case nothing is updated.
    pub fn step(&mut self, groups: &[ParamGroup<'_, T>]) -> Result<()> {
        for group in groups {
            for p in &group.params {
                if p.trainable() && p.tensor.grad_ref().is_none() {
                    return Err(Error::contract(format!("trainable parameter `{}` has no gradient", p.name)));
                }
            }
        }

        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - libm::pow(c.beta1, t as f64);
        let bias2 = 1.0 - libm::pow(c.beta2, t as f64);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
        let eps = T::from_f64(c.eps);

        for group in groups {
            let lr = T::from_f64(group.lr);
            let decay = T::one() - T::from_f64(group.lr * c.weight_decay);
            let (inv_bias1, inv_bias2) = (T::from_f64(1.0 / bias1), T::from_f64(1.0 / bias2));
            for p in &group.params {
                if !p.trainable() {
                    p.tensor.zero_grad();
                    continue;
                }
                let grad = p.tensor.grad().expect("checked above");
                let n = grad.len();
                let m = self.moments.entry(p.name.clone()).or_insert_with(|| Moments {
                    first: vec![T::zero(); n],
                    second: vec![T::zero(); n],
                });
                let mut values = p.tensor.data_mut();
                for i in 0..n {
                    let g = grad[i];
                    m.first[i] = b1 * m.first[i] + one_b1 * g;
                    m.second[i] = b2 * m.second[i] + one_b2 * g * g;
                    let m_hat = m.first[i] * inv_bias1;
                    let v_hat = m.second[i] * inv_bias2;
                    values[i] = values[i] * decay - lr * m_hat / (v_hat.sqrt() + eps);
                }
                drop(values);
                p.tensor.zero_grad();
            }
        }
        Ok(())
    }
}

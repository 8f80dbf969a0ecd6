use alloc::format;

use rand::Rng;

use super::HeadConfig;
use crate::init::{self, WEIGHT_STD};
use crate::tensor::{ParamId, ParamStore};
use crate::{Error, Result, Scalar, Tensor};

/// Mean pooling followed by a one-hidden-layer MLP with dropout.
#[derive(Debug, Clone)]
pub struct Head<T: Scalar> {
    config: HeadConfig,
    d_model: usize,
    params: ParamStore<T>,
    fc1: (ParamId, ParamId),
    fc2: (ParamId, ParamId),
}

impl<T: Scalar> Head<T> {
    /// All head parameters are trainable.
    pub fn new(config: HeadConfig, d_model: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let hidden = config.hidden(d_model);
        let n = config.n_outputs;
        let mut params = ParamStore::new();
        let mut linear = |name: &str, d_in: usize, d_out: usize| -> Result<(ParamId, ParamId)> {
            let w_name = format!("head.{name}.weight");
            let w = Tensor::param(init::normal(seed, &w_name, d_in * d_out, WEIGHT_STD), &[d_out, d_in])?;
            let b = Tensor::param(alloc::vec![T::zero(); d_out], &[d_out])?;
            Ok((params.insert(w_name, w)?, params.insert(format!("head.{name}.bias"), b)?))
        };
        let fc1 = linear("fc1", d_model, hidden)?;
        let fc2 = linear("fc2", hidden, n)?;
        Ok(Self {
            config,
            d_model,
            params,
            fc1,
            fc2,
        })
    }

    pub fn config(&self) -> &HeadConfig {
        &self.config
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    /// Mean over the non-prompt rows of `features: [T', d]`, then
    /// linear → GELU → dropout → linear. Returns `[n_outputs]` logits.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        features: &Tensor<T>,
        prompt_count: usize,
        training: bool,
        rng: &mut R,
    ) -> Result<Tensor<T>> {
        let rows = match features.shape() {
            [r, c] if *c == self.d_model => *r,
            s => return Err(Error::shape("head", s, &[0, self.d_model])),
        };
        if rows <= prompt_count {
            return Err(Error::contract(format!(
                "{rows} feature rows leave nothing to pool after {prompt_count} prompts"
            )));
        }
        let pooled = features.mean_rows(prompt_count, rows)?.reshape(&[1, self.d_model])?;
        let h = pooled
            .linear(self.params.tensor(self.fc1.0), Some(self.params.tensor(self.fc1.1)))?
            .gelu()
            .dropout(self.config.dropout_p, training, rng)?;
        let out = h.linear(self.params.tensor(self.fc2.0), Some(self.params.tensor(self.fc2.1)))?;
        out.reshape(&[self.config.n_outputs])
    }

    pub fn deep_clone(&self) -> Self {
        Self {
            params: self.params.deep_clone(),
            ..self.clone()
        }
    }
}

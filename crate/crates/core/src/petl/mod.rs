//! Parameter-efficient transfer: injection of the six methods into a frozen
//! backbone, their forward hooks, and the inference-time merges.
//!
//! [`AdaptedModel::inject`] consumes the backbone, so a model can only ever
//! carry one method. Injected parameters live in their own registry next to
//! the backbone's; the backbone registry keeps its structure except after a
//! merge, which rewrites weights in place.

mod blocks;
mod config;

use alloc::format;
use alloc::vec::Vec;

pub use blocks::{AdapterBlock, LoraPair, PrefixBank, PromptBank, SsfPair};
pub use config::{LoraScope, Method, PetlConfig, DEFAULT_BOTTLENECK, DEFAULT_PREFIX, DEFAULT_PROMPTS, DEFAULT_RANK};

use crate::backbone::{Backbone, Hooks, Linear};
use crate::tensor::kernels;
use crate::tensor::{Parameter, ParamStore};
use crate::{Error, Result, Scalar, Tensor};

#[derive(Debug, Clone)]
enum Parts {
    None,
    /// Per used layer: after-attention and after-feed-forward blocks.
    Adapter(Vec<[AdapterBlock; 2]>),
    Prompt(PromptBank),
    Prefix(PrefixBank),
    /// Indexed by linear site.
    Ssf(Vec<Option<SsfPair>>),
    Lora(Vec<Option<LoraPair>>),
}

/// A backbone plus exactly one adaptation method.
#[derive(Debug, Clone)]
pub struct AdaptedModel<T: Scalar> {
    base: Backbone<T>,
    method: Method,
    injected: ParamStore<T>,
    parts: Parts,
    merged: bool,
}

/// Sets `trainable` on the bias of every used layer (linear, norm and
/// convolution biases) and returns the number of values marked.
pub fn bitfit_mark<T: Scalar>(base: &Backbone<T>) -> usize {
    (0..base.use_layers())
        .map(|i| base.mark_trainable(&format!("layer.{i}.*.bias")))
        .sum()
}

impl<T: Scalar> AdaptedModel<T> {
    /// Freezes the backbone, then applies `method`. Injected parameters are
    /// seeded from the backbone seed and their registry name.
    pub fn inject(base: Backbone<T>, method: Method) -> Result<Self> {
        method.validate()?;
        base.freeze_all();
        let mut injected = ParamStore::new();
        let seed = base.seed();
        let d = base.config().d_model;
        let n_sites = base.linear_sites();
        let parts = match method {
            Method::Probing => Parts::None,
            Method::FineTune => {
                base.apply_fine_tune();
                Parts::None
            }
            Method::Petl(PetlConfig::BitFit) => {
                bitfit_mark(&base);
                Parts::None
            }
            Method::Petl(PetlConfig::Adapter { bottleneck }) => Parts::Adapter(
                (0..base.use_layers())
                    .map(|i| {
                        Ok([
                            AdapterBlock::create(&mut injected, seed, &format!("layer.{i}.attn_adapter"), d, bottleneck)?,
                            AdapterBlock::create(&mut injected, seed, &format!("layer.{i}.ff_adapter"), d, bottleneck)?,
                        ])
                    })
                    .collect::<Result<_>>()?,
            ),
            Method::Petl(PetlConfig::Prompt { n_prompts }) => {
                let tokens = blocks::normal_param(&mut injected, seed, "prompt.tokens", &[n_prompts, d])?;
                Parts::Prompt(PromptBank { tokens, n_prompts })
            }
            Method::Petl(PetlConfig::Prefix { n_prefix, mlp_hidden }) => Parts::Prefix(PrefixBank::create(
                &mut injected,
                seed,
                n_prefix,
                mlp_hidden.unwrap_or(d),
                base.use_layers(),
                d,
            )?),
            Method::Petl(PetlConfig::Ssf) => {
                let mut pairs = alloc::vec![None; n_sites];
                for lin in base.used_linears() {
                    pairs[lin.site] = Some(SsfPair::create(&mut injected, lin)?);
                }
                Parts::Ssf(pairs)
            }
            Method::Petl(PetlConfig::Lora { rank, scope }) => {
                let mut pairs = alloc::vec![None; n_sites];
                for lin in base.used_linears() {
                    if scope == LoraScope::Att && !lin.kind.is_attention() {
                        continue;
                    }
                    if rank > lin.d_in.min(lin.d_out) {
                        return Err(Error::invalid(
                            "method.rank",
                            format!("rank {rank} exceeds min(d_in, d_out) of `{}`", lin.path),
                        ));
                    }
                    pairs[lin.site] = Some(LoraPair::create(&mut injected, seed, lin, rank)?);
                }
                Parts::Lora(pairs)
            }
        };
        Ok(Self {
            base,
            method,
            injected,
            parts,
            merged: false,
        })
    }

    pub fn base(&self) -> &Backbone<T> {
        &self.base
    }

    pub fn method(&self) -> &Method {
        &self.method
    }

    /// Parameters added by the method (empty for probing, fine-tuning,
    /// BitFit, and after a merge).
    pub fn injected(&self) -> &ParamStore<T> {
        &self.injected
    }

    pub fn merged(&self) -> bool {
        self.merged
    }

    /// Rows prepended to every input sequence.
    pub fn prompt_count(&self) -> usize {
        match &self.parts {
            Parts::Prompt(bank) => bank.n_prompts,
            _ => 0,
        }
    }

    pub fn prefix_bank(&self) -> Option<&PrefixBank> {
        match &self.parts {
            Parts::Prefix(bank) => Some(bank),
            _ => None,
        }
    }

    /// Trainable backbone parameters followed by trainable injected ones.
    pub fn trainable(&self) -> impl Iterator<Item = &Parameter<T>> + '_ {
        self.base.params().trainable().chain(self.injected.trainable())
    }

    pub fn trainable_numel(&self) -> usize {
        self.base.params().trainable_numel() + self.injected.trainable_numel()
    }

    pub fn zero_grad(&self) {
        self.base.params().zero_grad();
        self.injected.zero_grad();
    }

    /// Binds the method's hooks for one or more forward passes. Prefix
    /// key/values are computed once per session.
    pub fn session(&self) -> Result<Session<'_, T>> {
        let prefix = match &self.parts {
            Parts::Prefix(bank) => Some(bank.kv_all(&self.injected)?),
            _ => None,
        };
        let prompts = match &self.parts {
            Parts::Prompt(bank) => Some(self.injected.tensor(bank.tokens).clone()),
            _ => None,
        };
        Ok(Session {
            model: self,
            prefix,
            prompts,
        })
    }

    /// Encoder features for `x: [T, d]`, shape `[T + prompt_count, d]`.
    pub fn forward_features(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let session = self.session()?;
        self.base.forward_features(x, &session)
    }

    /// Folds SSF scales and shifts into the host linears:
    /// `W' = diag(γ)·W`, `b' = γ ⊙ b + β`.
    pub fn merge_ssf(&mut self) -> Result<()> {
        let Parts::Ssf(pairs) = &self.parts else {
            return Err(self.merge_error("merge_ssf"));
        };
        for lin in self.base.used_linears() {
            let Some(pair) = &pairs[lin.site] else { continue };
            let gamma = self.injected.tensor(pair.scale).to_vec();
            let beta = self.injected.tensor(pair.shift).to_vec();
            let params = self.base.params();
            {
                let mut w = params.tensor(lin.weight).data_mut();
                for (row, g) in w.chunks_mut(lin.d_in).zip(&gamma) {
                    for v in row {
                        *v *= *g;
                    }
                }
            }
            let mut b = params.tensor(lin.bias).data_mut();
            for ((v, g), s) in b.iter_mut().zip(&gamma).zip(&beta) {
                *v = *g * *v + *s;
            }
        }
        self.finish_merge();
        Ok(())
    }

    /// Adds `A·B` into every host weight.
    pub fn merge_lora(&mut self) -> Result<()> {
        let Parts::Lora(pairs) = &self.parts else {
            return Err(self.merge_error("merge_lora"));
        };
        for lin in self.base.used_linears() {
            let Some(pair) = &pairs[lin.site] else { continue };
            let a = self.injected.tensor(pair.a).to_vec();
            let b = self.injected.tensor(pair.b).to_vec();
            let mut w = self.base.params().tensor(lin.weight).data_mut();
            kernels::gemm_nn(lin.d_out, pair.rank, lin.d_in, &a, &b, &mut w);
        }
        self.finish_merge();
        Ok(())
    }

    /// Replaces the prefix MLP by its output, a frozen `[L, 2, n, d]`
    /// constant. A second call is a no-op.
    pub fn bake_prefix(&mut self) -> Result<()> {
        let Parts::Prefix(bank) = &mut self.parts else {
            return Err(Error::contract(format!(
                "bake_prefix needs a prefix model, not {}",
                self.method.label()
            )));
        };
        if bank.baked.is_some() {
            return Ok(());
        }
        let values = bank.bake_values(&self.injected)?;
        let shape = [bank.layers, 2, bank.n_prefix, bank.d_model];
        self.injected.clear();
        let baked = Tensor::new(values, &shape)?;
        bank.baked = Some(self.injected.insert("prefix.baked", baked)?);
        Ok(())
    }

    /// Gives back the backbone; meaningful for fine-tuned, BitFit and
    /// merged models whose state lives entirely in it.
    pub fn into_base(self) -> Backbone<T> {
        self.base
    }

    pub fn deep_clone(&self) -> Self {
        Self {
            base: self.base.deep_clone(),
            injected: self.injected.deep_clone(),
            ..self.clone()
        }
    }

    fn merge_error(&self, op: &str) -> Error {
        if self.merged {
            Error::contract(format!("{op}: model is already merged"))
        } else {
            Error::contract(format!("{op} does not apply to a {} model", self.method.label()))
        }
    }

    fn finish_merge(&mut self) {
        self.injected.clear();
        self.parts = Parts::None;
        self.merged = true;
    }
}

/// Forward hooks of an [`AdaptedModel`].
pub struct Session<'a, T: Scalar> {
    model: &'a AdaptedModel<T>,
    prefix: Option<Vec<(Tensor<T>, Tensor<T>)>>,
    prompts: Option<Tensor<T>>,
}

impl<T: Scalar> Session<'_, T> {
    pub fn forward_features(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.model.base.forward_features(x, self)
    }
}

impl<T: Scalar> Hooks<T> for Session<'_, T> {
    fn prompts(&self) -> Option<Tensor<T>> {
        self.prompts.clone()
    }

    fn linear(&self, lin: &Linear, params: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let store = &self.model.injected;
        match &self.model.parts {
            Parts::Ssf(pairs) => match &pairs[lin.site] {
                Some(pair) => pair.forward(store, &lin.forward(params, x)?),
                None => lin.forward(params, x),
            },
            Parts::Lora(pairs) => match &pairs[lin.site] {
                Some(pair) => pair.forward(store, lin, params, x),
                None => lin.forward(params, x),
            },
            _ => lin.forward(params, x),
        }
    }

    fn prefix_kv(&self, layer: usize) -> Result<Option<(Tensor<T>, Tensor<T>)>> {
        Ok(self.prefix.as_ref().and_then(|kv| kv.get(layer).cloned()))
    }

    fn after_attention(&self, layer: usize, h: Tensor<T>) -> Result<Tensor<T>> {
        match &self.model.parts {
            Parts::Adapter(blocks) if layer < blocks.len() => blocks[layer][0].forward(&self.model.injected, &h),
            _ => Ok(h),
        }
    }

    fn after_feed_forward(&self, layer: usize, h: Tensor<T>) -> Result<Tensor<T>> {
        match &self.model.parts {
            Parts::Adapter(blocks) if layer < blocks.len() => blocks[layer][1].forward(&self.model.injected, &h),
            _ => Ok(h),
        }
    }
}

//! Injected parameter blocks and their forward rules.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::backbone::Linear;
use crate::init::{self, WEIGHT_STD};
use crate::tensor::{concat_rows, ParamId, ParamStore};
use crate::{Result, Scalar, Tensor};

pub(crate) fn normal_param<T: Scalar>(
    store: &mut ParamStore<T>,
    seed: u64,
    name: &str,
    shape: &[usize],
) -> Result<ParamId> {
    let n = shape.iter().product();
    store.insert(name, Tensor::param(init::normal(seed, name, n, WEIGHT_STD), shape)?)
}

pub(crate) fn const_param<T: Scalar>(store: &mut ParamStore<T>, name: &str, shape: &[usize], v: f64) -> Result<ParamId> {
    let n = shape.iter().product();
    store.insert(name, Tensor::param(vec![T::from_f64(v); n], shape)?)
}

/// Residual bottleneck: `x + W₂·σ(W₁·LN(x) + b₁) + b₂`.
#[derive(Debug, Clone)]
pub struct AdapterBlock {
    pub norm_gamma: ParamId,
    pub norm_beta: ParamId,
    /// `[bottleneck, d]`
    pub down_weight: ParamId,
    pub down_bias: ParamId,
    /// `[d, bottleneck]`, zero at init so the block starts as the identity.
    pub up_weight: ParamId,
    pub up_bias: ParamId,
}

impl AdapterBlock {
    pub(crate) fn create<T: Scalar>(
        store: &mut ParamStore<T>,
        seed: u64,
        path: &str,
        d: usize,
        bottleneck: usize,
    ) -> Result<Self> {
        Ok(Self {
            norm_gamma: const_param(store, &format!("{path}.norm.weight"), &[d], 1.0)?,
            norm_beta: const_param(store, &format!("{path}.norm.bias"), &[d], 0.0)?,
            down_weight: normal_param(store, seed, &format!("{path}.down.weight"), &[bottleneck, d])?,
            down_bias: const_param(store, &format!("{path}.down.bias"), &[bottleneck], 0.0)?,
            up_weight: const_param(store, &format!("{path}.up.weight"), &[d, bottleneck], 0.0)?,
            up_bias: const_param(store, &format!("{path}.up.bias"), &[d], 0.0)?,
        })
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = x.layer_norm(
            store.tensor(self.norm_gamma),
            store.tensor(self.norm_beta),
            crate::backbone::layers::LN_EPS,
        )?;
        let h = h
            .linear(store.tensor(self.down_weight), Some(store.tensor(self.down_bias)))?
            .gelu()
            .linear(store.tensor(self.up_weight), Some(store.tensor(self.up_bias)))?;
        x.add(&h)
    }
}

/// Per-channel scale and shift on the output of one linear map.
#[derive(Debug, Clone)]
pub struct SsfPair {
    /// `[d_out]`, init 1.
    pub scale: ParamId,
    /// `[d_out]`, init 0.
    pub shift: ParamId,
}

impl SsfPair {
    pub(crate) fn create<T: Scalar>(store: &mut ParamStore<T>, host: &Linear) -> Result<Self> {
        Ok(Self {
            scale: const_param(store, &format!("{}.ssf_scale", host.path), &[host.d_out], 1.0)?,
            shift: const_param(store, &format!("{}.ssf_shift", host.path), &[host.d_out], 0.0)?,
        })
    }

    /// `γ ⊙ h + β`
    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, h: &Tensor<T>) -> Result<Tensor<T>> {
        h.mul_row(store.tensor(self.scale))?.add_row(store.tensor(self.shift))
    }
}

/// Low-rank update `ΔW = A·B` for one linear map.
#[derive(Debug, Clone)]
pub struct LoraPair {
    /// `[d_out, r]`, Gaussian init.
    pub a: ParamId,
    /// `[r, d_in]`, zero init.
    pub b: ParamId,
    pub rank: usize,
}

impl LoraPair {
    pub(crate) fn create<T: Scalar>(store: &mut ParamStore<T>, seed: u64, host: &Linear, rank: usize) -> Result<Self> {
        Ok(Self {
            a: normal_param(store, seed, &format!("{}.lora_a", host.path), &[host.d_out, rank])?,
            b: const_param(store, &format!("{}.lora_b", host.path), &[rank, host.d_in], 0.0)?,
            rank,
        })
    }

    /// `x·Wᵀ + b + (x·Bᵀ)·Aᵀ`; the product `A·B` is never formed.
    pub fn forward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        host: &Linear,
        base: &ParamStore<T>,
        x: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let y = host.forward(base, x)?;
        let delta = x.matmul_nt(store.tensor(self.b))?.matmul_nt(store.tensor(self.a))?;
        y.add(&delta)
    }
}

/// Trainable rows prepended to the layer-1 input.
#[derive(Debug, Clone)]
pub struct PromptBank {
    /// `[n_prompts, d]`
    pub tokens: ParamId,
    pub n_prompts: usize,
}

impl PromptBank {
    pub fn prepend<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        concat_rows(&[store.tensor(self.tokens).clone(), x.clone()])
    }
}

/// Prefix embeddings reparameterized through a two-layer MLP
/// `d → hidden → 2·L·d`. After baking, the MLP output is stored directly.
#[derive(Debug, Clone)]
pub struct PrefixBank {
    pub n_prefix: usize,
    pub hidden: usize,
    pub layers: usize,
    pub d_model: usize,
    pub embeddings: ParamId,
    pub fc1: (ParamId, ParamId),
    pub fc2: (ParamId, ParamId),
    /// `[layers, 2, n_prefix, d]` once baked.
    pub baked: Option<ParamId>,
}

impl PrefixBank {
    pub(crate) fn create<T: Scalar>(
        store: &mut ParamStore<T>,
        seed: u64,
        n_prefix: usize,
        hidden: usize,
        layers: usize,
        d: usize,
    ) -> Result<Self> {
        let out = 2 * layers * d;
        Ok(Self {
            n_prefix,
            hidden,
            layers,
            d_model: d,
            embeddings: normal_param(store, seed, "prefix.embeddings", &[n_prefix, d])?,
            fc1: (
                normal_param(store, seed, "prefix.mlp.fc1.weight", &[hidden, d])?,
                const_param(store, "prefix.mlp.fc1.bias", &[hidden], 0.0)?,
            ),
            fc2: (
                normal_param(store, seed, "prefix.mlp.fc2.weight", &[out, hidden])?,
                const_param(store, "prefix.mlp.fc2.bias", &[out], 0.0)?,
            ),
            baked: None,
        })
    }

    /// MLP output `[n_prefix, 2·L·d]`; column block `2l` holds layer `l`'s
    /// keys and block `2l + 1` its values.
    fn mlp<T: Scalar>(&self, store: &ParamStore<T>) -> Result<Tensor<T>> {
        store
            .tensor(self.embeddings)
            .linear(store.tensor(self.fc1.0), Some(store.tensor(self.fc1.1)))?
            .tanh()
            .linear(store.tensor(self.fc2.0), Some(store.tensor(self.fc2.1)))
    }

    /// Key/value prefixes for every used layer.
    pub fn kv_all<T: Scalar>(&self, store: &ParamStore<T>) -> Result<Vec<(Tensor<T>, Tensor<T>)>> {
        let d = self.d_model;
        if let Some(baked) = self.baked {
            let data = store.tensor(baked).data();
            let block = self.n_prefix * d;
            return (0..self.layers)
                .map(|l| {
                    let k = data[(2 * l) * block..(2 * l + 1) * block].to_vec();
                    let v = data[(2 * l + 1) * block..(2 * l + 2) * block].to_vec();
                    Ok((Tensor::new(k, &[self.n_prefix, d])?, Tensor::new(v, &[self.n_prefix, d])?))
                })
                .collect();
        }
        let out = self.mlp(store)?;
        (0..self.layers)
            .map(|l| Ok((out.slice_cols(2 * l * d, d)?, out.slice_cols((2 * l + 1) * d, d)?)))
            .collect()
    }

    /// The `[layers, 2, n_prefix, d]` constant that replaces the MLP.
    pub(crate) fn bake_values<T: Scalar>(&self, store: &ParamStore<T>) -> Result<Vec<T>> {
        let mut values = Vec::with_capacity(2 * self.layers * self.n_prefix * self.d_model);
        for (k, v) in self.kv_all(store)? {
            values.extend_from_slice(&k.data());
            values.extend_from_slice(&v.data());
        }
        Ok(values)
    }
}

//! Layer structures. Layers hold [`ParamId`]s into the backbone registry and
//! route every linear map through the caller's [`Hooks`].

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::Hooks;
use crate::init::{self, WEIGHT_STD};
use crate::tensor::{attention, ParamId, ParamStore};
use crate::{Result, Scalar, Tensor};

pub const LN_EPS: f64 = 1e-5;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LinearKind {
    Query,
    Key,
    Value,
    Output,
    /// Feed-forward expansion `d → ff_mult·d`.
    FfUp,
    /// Feed-forward contraction `ff_mult·d → d`.
    FfDown,
    /// Conformer conv module input projection `d → 2d`.
    ConvIn,
    /// Conformer conv module output projection `d → d`.
    ConvOut,
}

impl LinearKind {
    pub fn is_attention(self) -> bool {
        matches!(self, Self::Query | Self::Key | Self::Value | Self::Output)
    }
}

/// A dense map `y = x·Wᵀ + b` with `W: [d_out, d_in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    /// Registry path without the `.weight`/`.bias` suffix.
    pub path: String,
    /// Dense index over every linear in the backbone, in build order.
    pub site: usize,
    pub layer: usize,
    pub kind: LinearKind,
    pub d_in: usize,
    pub d_out: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn forward<T: Scalar>(&self, params: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.linear(params.tensor(self.weight), Some(params.tensor(self.bias)))
    }
}

/// Affine layer normalization parameters (`weight` = gamma, `bias` = beta).
#[derive(Debug, Clone)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn forward<T: Scalar>(&self, params: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.layer_norm(params.tensor(self.gamma), params.tensor(self.beta), LN_EPS)
    }
}

#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub n_heads: usize,
}

impl SelfAttention {
    fn forward<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        hooks: &dyn Hooks<T>,
        layer: usize,
        x: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let q = hooks.linear(&self.q, params, x)?;
        let k = hooks.linear(&self.k, params, x)?;
        let v = hooks.linear(&self.v, params, x)?;
        let prefix = hooks.prefix_kv(layer)?;
        let a = attention(&q, &k, &v, self.n_heads, prefix.as_ref().map(|(pk, pv)| (pk, pv)))?;
        hooks.linear(&self.o, params, &a)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    fn forward<T: Scalar>(&self, params: &ParamStore<T>, hooks: &dyn Hooks<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = hooks.linear(&self.up, params, x)?.gelu();
        hooks.linear(&self.down, params, &h)
    }
}

/// Post-LN encoder block: `LN(x + MHSA(x))`, then `LN(h + FF(h))`.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    pub attn: SelfAttention,
    pub attn_norm: Norm,
    pub ff: FeedForward,
    pub ff_norm: Norm,
}

impl TransformerLayer {
    pub fn forward<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        hooks: &dyn Hooks<T>,
        layer: usize,
        x: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let h = x.add(&self.attn.forward(params, hooks, layer, x)?)?;
        let h = hooks.after_attention(layer, h)?;
        let h = self.attn_norm.forward(params, &h)?;
        let f = h.add(&self.ff.forward(params, hooks, &h)?)?;
        let f = hooks.after_feed_forward(layer, f)?;
        self.ff_norm.forward(params, &f)
    }
}

/// Pointwise `d → 2d` + GLU, depthwise conv, batch norm (inference mode),
/// SiLU, pointwise `d → d`.
#[derive(Debug, Clone)]
pub struct ConvModule {
    pub norm: Norm,
    pub pw_in: Linear,
    pub depthwise_kernel: ParamId,
    pub depthwise_bias: ParamId,
    pub bn: Norm,
    /// Batch-norm running statistics. Fixed buffers, not parameters.
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub pw_out: Linear,
}

impl ConvModule {
    fn forward<T: Scalar>(&self, params: &ParamStore<T>, hooks: &dyn Hooks<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.norm.forward(params, x)?;
        let h = hooks.linear(&self.pw_in, params, &h)?.glu()?;
        let h = h.depthwise_conv1d(params.tensor(self.depthwise_kernel), params.tensor(self.depthwise_bias))?;
        let shift: Vec<f64> = self.running_mean.iter().map(|m| -m).collect();
        let inv_std: Vec<f64> = self.running_var.iter().map(|v| 1.0 / libm::sqrt(v + BN_EPS)).collect();
        let d = shift.len();
        let h = h
            .add_row(&Tensor::from_f64(&shift, &[d])?)?
            .mul_row(&Tensor::from_f64(&inv_std, &[d])?)?
            .mul_row(params.tensor(self.bn.gamma))?
            .add_row(params.tensor(self.bn.beta))?
            .silu();
        hooks.linear(&self.pw_out, params, &h)
    }
}

/// Macaron conformer block with pre-LN sub-blocks and a final LN.
#[derive(Debug, Clone)]
pub struct ConformerLayer {
    pub ff1_norm: Norm,
    pub ff1: FeedForward,
    pub attn_norm: Norm,
    pub attn: SelfAttention,
    pub conv: ConvModule,
    pub ff2_norm: Norm,
    pub ff2: FeedForward,
    pub final_norm: Norm,
}

impl ConformerLayer {
    pub fn forward<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        hooks: &dyn Hooks<T>,
        layer: usize,
        x: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let f = self.ff1.forward(params, hooks, &self.ff1_norm.forward(params, x)?)?;
        let h = x.add(&f.scale(0.5))?;
        let a = self.attn.forward(params, hooks, layer, &self.attn_norm.forward(params, &h)?)?;
        let h = hooks.after_attention(layer, h.add(&a)?)?;
        let h = h.add(&self.conv.forward(params, hooks, &h)?)?;
        let f = self.ff2.forward(params, hooks, &self.ff2_norm.forward(params, &h)?)?;
        let h = hooks.after_feed_forward(layer, h.add(&f.scale(0.5))?)?;
        self.final_norm.forward(params, &h)
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    Transformer(TransformerLayer),
    Conformer(ConformerLayer),
}

impl Layer {
    pub fn forward<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        hooks: &dyn Hooks<T>,
        layer: usize,
        x: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        match self {
            Layer::Transformer(l) => l.forward(params, hooks, layer, x),
            Layer::Conformer(l) => l.forward(params, hooks, layer, x),
        }
    }

    /// Every linear map of the layer, in a fixed order.
    pub fn linears(&self) -> Vec<&Linear> {
        match self {
            Layer::Transformer(l) => vec![&l.attn.q, &l.attn.k, &l.attn.v, &l.attn.o, &l.ff.up, &l.ff.down],
            Layer::Conformer(l) => vec![
                &l.ff1.up,
                &l.ff1.down,
                &l.attn.q,
                &l.attn.k,
                &l.attn.v,
                &l.attn.o,
                &l.conv.pw_in,
                &l.conv.pw_out,
                &l.ff2.up,
                &l.ff2.down,
            ],
        }
    }
}

/// Allocates parameters into a registry while building layers.
pub(crate) struct Builder<'a, T: Scalar> {
    pub params: &'a mut ParamStore<T>,
    pub seed: u64,
    pub next_site: usize,
}

impl<T: Scalar> Builder<'_, T> {
    fn tensor(&mut self, name: String, shape: &[usize], values: Vec<T>) -> Result<ParamId> {
        self.params.insert(name, Tensor::new(values, shape)?)
    }

    fn normal(&mut self, name: String, shape: &[usize]) -> Result<ParamId> {
        let n = shape.iter().product();
        let values = init::normal(self.seed, &name, n, WEIGHT_STD);
        self.tensor(name, shape, values)
    }

    fn filled(&mut self, name: String, shape: &[usize], v: f64) -> Result<ParamId> {
        let n = shape.iter().product();
        self.tensor(name, shape, vec![T::from_f64(v); n])
    }

    pub fn linear(&mut self, path: String, layer: usize, kind: LinearKind, d_in: usize, d_out: usize) -> Result<Linear> {
        let weight = self.normal(format!("{path}.weight"), &[d_out, d_in])?;
        let bias = self.filled(format!("{path}.bias"), &[d_out], 0.0)?;
        let site = self.next_site;
        self.next_site += 1;
        Ok(Linear {
            path,
            site,
            layer,
            kind,
            d_in,
            d_out,
            weight,
            bias,
        })
    }

    pub fn norm(&mut self, path: String, d: usize) -> Result<Norm> {
        Ok(Norm {
            gamma: self.filled(format!("{path}.weight"), &[d], 1.0)?,
            beta: self.filled(format!("{path}.bias"), &[d], 0.0)?,
        })
    }

    fn attention(&mut self, path: &str, layer: usize, d: usize, n_heads: usize) -> Result<SelfAttention> {
        Ok(SelfAttention {
            q: self.linear(format!("{path}.q"), layer, LinearKind::Query, d, d)?,
            k: self.linear(format!("{path}.k"), layer, LinearKind::Key, d, d)?,
            v: self.linear(format!("{path}.v"), layer, LinearKind::Value, d, d)?,
            o: self.linear(format!("{path}.o"), layer, LinearKind::Output, d, d)?,
            n_heads,
        })
    }

    fn feed_forward(&mut self, path: &str, layer: usize, d: usize, hidden: usize) -> Result<FeedForward> {
        Ok(FeedForward {
            up: self.linear(format!("{path}.up"), layer, LinearKind::FfUp, d, hidden)?,
            down: self.linear(format!("{path}.down"), layer, LinearKind::FfDown, hidden, d)?,
        })
    }

    pub fn transformer_layer(&mut self, i: usize, d: usize, n_heads: usize, ff_mult: usize) -> Result<TransformerLayer> {
        let p = format!("layer.{i}");
        Ok(TransformerLayer {
            attn: self.attention(&format!("{p}.attn"), i, d, n_heads)?,
            attn_norm: self.norm(format!("{p}.attn_norm"), d)?,
            ff: self.feed_forward(&format!("{p}.ff"), i, d, ff_mult * d)?,
            ff_norm: self.norm(format!("{p}.ff_norm"), d)?,
        })
    }

    pub fn conformer_layer(
        &mut self,
        i: usize,
        d: usize,
        n_heads: usize,
        ff_mult: usize,
        kernel: usize,
    ) -> Result<ConformerLayer> {
        let p = format!("layer.{i}");
        let ff1_norm = self.norm(format!("{p}.ff1.norm"), d)?;
        let ff1 = self.feed_forward(&format!("{p}.ff1"), i, d, ff_mult * d)?;
        let attn_norm = self.norm(format!("{p}.attn_norm"), d)?;
        let attn = self.attention(&format!("{p}.attn"), i, d, n_heads)?;
        let conv = ConvModule {
            norm: self.norm(format!("{p}.conv.norm"), d)?,
            pw_in: self.linear(format!("{p}.conv.pw_in"), i, LinearKind::ConvIn, d, 2 * d)?,
            depthwise_kernel: self.normal(format!("{p}.conv.depthwise.weight"), &[kernel, d])?,
            depthwise_bias: self.filled(format!("{p}.conv.depthwise.bias"), &[d], 0.0)?,
            bn: self.norm(format!("{p}.conv.bn"), d)?,
            running_mean: vec![0.0; d],
            running_var: vec![1.0; d],
            pw_out: self.linear(format!("{p}.conv.pw_out"), i, LinearKind::ConvOut, d, d)?,
        };
        let ff2_norm = self.norm(format!("{p}.ff2.norm"), d)?;
        let ff2 = self.feed_forward(&format!("{p}.ff2"), i, d, ff_mult * d)?;
        let final_norm = self.norm(format!("{p}.final_norm"), d)?;
        Ok(ConformerLayer {
            ff1_norm,
            ff1,
            attn_norm,
            attn,
            conv,
            ff2_norm,
            ff2,
            final_norm,
        })
    }
}

//! Miniature encoders with a named parameter registry.
//!
//! A [`Backbone`] owns its [`ParamStore`] and an ordered stack of layers.
//! Forward passes run the first `use_layers` layers only; deeper layers keep
//! their parameters but never enter the graph, so they never get gradients.
//!
//! PETL methods customize the forward pass through [`Hooks`] rather than by
//! editing layers: every linear map, the key/value sequence of every attention
//! and the two residual points per layer are hook sites.

mod config;
mod head;
pub mod layers;

use alloc::format;
use alloc::vec::Vec;

pub use config::{ArchConfig, Family, HeadConfig, OutputKind};
pub use head::Head;
pub use layers::{Layer, Linear, LinearKind};

use crate::tensor::{concat_rows, param::glob_match, ParamStore};
use crate::{Error, Result, Scalar, Tensor};

/// Layers fed to the head unless configured otherwise.
pub const DEFAULT_USE_LAYERS: usize = 6;

/// Forward-pass customization points. The defaults reproduce the plain
/// encoder.
pub trait Hooks<T: Scalar> {
    /// Rows prepended to the layer-1 input.
    fn prompts(&self) -> Option<Tensor<T>> {
        None
    }

    fn linear(&self, lin: &Linear, params: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        lin.forward(params, x)
    }

    /// Extra key/value rows for the attention of `layer`.
    fn prefix_kv(&self, _layer: usize) -> Result<Option<(Tensor<T>, Tensor<T>)>> {
        Ok(None)
    }

    /// Applied to the residual stream right after the attention residual.
    fn after_attention(&self, _layer: usize, h: Tensor<T>) -> Result<Tensor<T>> {
        Ok(h)
    }

    /// Applied right after the (last) feed-forward residual.
    fn after_feed_forward(&self, _layer: usize, h: Tensor<T>) -> Result<Tensor<T>> {
        Ok(h)
    }
}

/// No customization.
pub struct Plain;

impl<T: Scalar> Hooks<T> for Plain {}

#[derive(Debug, Clone)]
pub struct Backbone<T: Scalar> {
    config: ArchConfig,
    seed: u64,
    params: ParamStore<T>,
    layers: Vec<Layer>,
    use_layers: usize,
}

impl<T: Scalar> Backbone<T> {
    /// Allocates and initializes every layer. `use_layers` starts at
    /// `min(6, n_layers)`.
    pub fn build(config: ArchConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut builder = layers::Builder {
            params: &mut params,
            seed,
            next_site: 0,
        };
        let d = config.d_model;
        let mut stack = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            stack.push(match config.family {
                Family::Transformer => Layer::Transformer(builder.transformer_layer(i, d, config.n_heads, config.ff_mult)?),
                Family::Conformer => Layer::Conformer(builder.conformer_layer(
                    i,
                    d,
                    config.n_heads,
                    config.ff_mult,
                    config.conv_kernel,
                )?),
            });
        }
        Ok(Self {
            config,
            seed,
            params,
            layers: stack,
            use_layers: config.n_layers.min(DEFAULT_USE_LAYERS),
        })
    }

    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn use_layers(&self) -> usize {
        self.use_layers
    }

    pub fn set_use_layers(&mut self, k: usize) -> Result<()> {
        if k == 0 || k > self.config.n_layers {
            return Err(Error::invalid(
                "use_layers",
                format!("{k} is outside 1..={}", self.config.n_layers),
            ));
        }
        self.use_layers = k;
        Ok(())
    }

    pub fn with_use_layers(mut self, k: usize) -> Result<Self> {
        self.set_use_layers(k)?;
        Ok(self)
    }

    /// Linear maps of the used layers.
    pub fn used_linears(&self) -> impl Iterator<Item = &Linear> + '_ {
        self.layers[..self.use_layers].iter().flat_map(Layer::linears)
    }

    /// Total number of linear sites over all layers.
    pub fn linear_sites(&self) -> usize {
        self.layers.iter().map(|l| l.linears().len()).sum()
    }

    /// Runs layers `0..use_layers`. Prompt rows from `hooks` are prepended to
    /// the input, so the output has `T + prompts` rows.
    pub fn forward_features(&self, x: &Tensor<T>, hooks: &dyn Hooks<T>) -> Result<Tensor<T>> {
        let d = self.config.d_model;
        match x.shape() {
            [t, c] if *c == d && *t >= 1 => {}
            [0, _] => return Err(Error::contract("input sequence must have at least one frame")),
            s => return Err(Error::shape("forward_features", s, &[0, d])),
        }
        let mut h = match hooks.prompts() {
            Some(p) => concat_rows(&[p, x.clone()])?,
            None => x.clone(),
        };
        let len = h.shape()[0];
        if len > self.config.max_seq {
            return Err(Error::contract(format!(
                "sequence of {len} rows exceeds max_seq = {}",
                self.config.max_seq
            )));
        }
        for (i, layer) in self.layers[..self.use_layers].iter().enumerate() {
            h = layer.forward(&self.params, hooks, i, &h)?;
        }
        Ok(h)
    }

    /// Runs a single layer on `x` with no prompt handling.
    pub fn forward_layer(&self, index: usize, x: &Tensor<T>, hooks: &dyn Hooks<T>) -> Result<Tensor<T>> {
        let layer = self
            .layers
            .get(index)
            .ok_or_else(|| Error::contract(format!("no layer {index}")))?;
        layer.forward(&self.params, hooks, index, x)
    }

    /// Sets `trainable = true` on every parameter whose name matches the glob
    /// `pattern` and returns the number of scalar values affected. Other
    /// parameters keep their flag.
    pub fn mark_trainable(&self, pattern: &str) -> usize {
        let mut count = 0;
        for p in self.params.iter().filter(|p| glob_match(pattern, &p.name)) {
            p.set_trainable(true);
            count += p.numel();
        }
        if count == 0 {
            log::warn!("trainable pattern `{pattern}` matched no parameters");
        }
        count
    }

    pub fn freeze_all(&self) {
        self.params.freeze_all();
    }

    /// Probing: no backbone parameter is trainable.
    pub fn apply_probing(&self) -> usize {
        self.freeze_all();
        0
    }

    /// Full fine-tuning of the used layers.
    pub fn apply_fine_tune(&self) -> usize {
        self.freeze_all();
        (0..self.use_layers).map(|i| self.mark_trainable(&format!("layer.{i}.*"))).sum()
    }

    /// Sum of parameter sizes in layer `index`.
    pub fn layer_numel(&self, index: usize) -> usize {
        let prefix = format!("layer.{index}.");
        self.params.iter().filter(|p| p.name.starts_with(&prefix)).map(|p| p.numel()).sum()
    }

    pub fn deep_clone(&self) -> Self {
        Self {
            params: self.params.deep_clone(),
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_names_follow_layer_paths() {
        let b = Backbone::<f32>::build(ArchConfig::transformer(8, 2, 2), 0).unwrap();
        let names: Vec<_> = b.params().names().collect();
        assert!(names.contains(&"layer.0.attn.q.weight"));
        assert!(names.contains(&"layer.1.ff_norm.bias"));
        assert_eq!(b.params().len(), 2 * 16);
        assert_eq!(b.linear_sites(), 12);
    }

    #[test]
    fn use_layers_is_bounded() {
        let mut b = Backbone::<f32>::build(ArchConfig::transformer(8, 2, 2), 0).unwrap();
        assert_eq!(b.use_layers(), 2);
        assert!(b.set_use_layers(3).is_err());
        assert!(b.set_use_layers(0).is_err());
        b.set_use_layers(1).unwrap();
    }

    #[test]
    fn zero_length_and_overlong_inputs_are_rejected() {
        let b = Backbone::<f64>::build(ArchConfig::transformer(8, 1, 2).with_max_seq(4), 0).unwrap();
        let empty = Tensor::<f64>::new(Vec::new(), &[0, 8]).unwrap();
        assert!(matches!(b.forward_features(&empty, &Plain), Err(Error::Contract(_))));
        let long = Tensor::<f64>::zeros(&[5, 8]);
        assert!(matches!(b.forward_features(&long, &Plain), Err(Error::Contract(_))));
        let wrong = Tensor::<f64>::zeros(&[2, 7]);
        assert!(matches!(b.forward_features(&wrong, &Plain), Err(Error::Shape { .. })));
    }

    #[test]
    fn empty_pattern_match_counts_zero() {
        let b = Backbone::<f32>::build(ArchConfig::transformer(8, 1, 2), 0).unwrap();
        b.freeze_all();
        assert_eq!(b.mark_trainable("nothing.*"), 0);
        assert_eq!(b.params().trainable_numel(), 0);
    }
}

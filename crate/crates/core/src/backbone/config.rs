use alloc::format;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Transformer,
    Conformer,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::Transformer => "transformer",
            Family::Conformer => "conformer",
        }
    }
}

/// Encoder shape. Weights are never part of the config.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub family: Family,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    #[serde(default = "default_ff_mult")]
    pub ff_mult: usize,
    /// Depthwise kernel width; only the conformer uses it.
    #[serde(default = "default_conv_kernel")]
    pub conv_kernel: usize,
    #[serde(default = "default_max_seq")]
    pub max_seq: usize,
}

fn default_ff_mult() -> usize {
    4
}

fn default_conv_kernel() -> usize {
    31
}

fn default_max_seq() -> usize {
    512
}

impl ArchConfig {
    pub fn transformer(d_model: usize, n_layers: usize, n_heads: usize) -> Self {
        Self {
            family: Family::Transformer,
            d_model,
            n_layers,
            n_heads,
            ff_mult: default_ff_mult(),
            conv_kernel: default_conv_kernel(),
            max_seq: default_max_seq(),
        }
    }

    pub fn conformer(d_model: usize, n_layers: usize, n_heads: usize) -> Self {
        Self {
            family: Family::Conformer,
            ..Self::transformer(d_model, n_layers, n_heads)
        }
    }

    /// 12-layer, 768-wide transformer (the HuBERT-style music encoder shape).
    pub fn transformer_base() -> Self {
        Self::transformer(768, 12, 12)
    }

    /// 12-layer, 1024-wide conformer.
    pub fn conformer_base() -> Self {
        Self::conformer(1024, 12, 8)
    }

    pub fn with_max_seq(mut self, max_seq: usize) -> Self {
        self.max_seq = max_seq;
        self
    }

    pub fn with_conv_kernel(mut self, k: usize) -> Self {
        self.conv_kernel = k;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 {
            return Err(Error::invalid("arch.d_model", "must be positive"));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::invalid(
                "arch.n_heads",
                format!("{} heads do not divide d_model = {}", self.n_heads, self.d_model),
            ));
        }
        if self.n_layers == 0 {
            return Err(Error::invalid("arch.n_layers", "must be at least 1"));
        }
        if self.ff_mult == 0 {
            return Err(Error::invalid("arch.ff_mult", "must be at least 1"));
        }
        if self.conv_kernel % 2 == 0 {
            return Err(Error::invalid("arch.conv_kernel", format!("{} is not odd", self.conv_kernel)));
        }
        if self.max_seq == 0 {
            return Err(Error::invalid("arch.max_seq", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputKind {
    /// Independent sigmoid per output (tagging).
    Multilabel,
    /// Softmax over outputs (classification).
    Multiclass,
    /// Unbounded real outputs trained with L2.
    Regression,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    /// Defaults to the feature width.
    #[serde(default)]
    pub hidden_dim: Option<usize>,
    pub n_outputs: usize,
    #[serde(default = "default_dropout")]
    pub dropout_p: f64,
    pub output_kind: OutputKind,
}

fn default_dropout() -> f64 {
    0.5
}

impl HeadConfig {
    pub fn new(n_outputs: usize, output_kind: OutputKind) -> Self {
        Self {
            hidden_dim: None,
            n_outputs,
            dropout_p: default_dropout(),
            output_kind,
        }
    }

    pub fn hidden(&self, d_model: usize) -> usize {
        self.hidden_dim.unwrap_or(d_model)
    }

    /// `d·h + h + h·n + n`
    pub fn param_count(&self, d_model: usize) -> u64 {
        let (d, h, n) = (d_model as u64, self.hidden(d_model) as u64, self.n_outputs as u64);
        d * h + h + h * n + n
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_outputs == 0 {
            return Err(Error::invalid("head.n_outputs", "must be at least 1"));
        }
        if self.hidden_dim == Some(0) {
            return Err(Error::invalid("head.hidden_dim", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::invalid("head.dropout_p", format!("{} is outside [0, 1)", self.dropout_p)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation_names_the_field() {
        let mut cfg = ArchConfig::transformer(30, 2, 4);
        match cfg.validate() {
            Err(Error::Validation { field, .. }) => assert_eq!(field, "arch.n_heads"),
            other => panic!("{other:?}"),
        }
        cfg = ArchConfig::conformer(32, 2, 4).with_conv_kernel(4);
        assert!(matches!(cfg.validate(), Err(Error::Validation { field, .. }) if field == "arch.conv_kernel"));
        assert!(ArchConfig::transformer(32, 0, 4).validate().is_err());
        assert!(ArchConfig::transformer_base().validate().is_ok());
        assert!(ArchConfig::conformer_base().validate().is_ok());
    }

    #[test]
    fn head_count_formula() {
        let head = HeadConfig::new(10, OutputKind::Multiclass);
        assert_eq!(head.param_count(4), 4 * 4 + 4 + 4 * 10 + 10);
        assert!(HeadConfig { dropout_p: 1.0, ..head }.validate().is_err());
        assert!(HeadConfig { n_outputs: 0, ..head }.validate().is_err());
    }
}

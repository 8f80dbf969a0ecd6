//! Closed-form trainable-parameter counts and registry audits.
//!
//! Counts are backbone-side: the task head is excluded unless asked for.
//! Per-layer groups are keyed `layer.{i}`; global banks are keyed `prompt`
//! and `prefix`, the head `head`.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::Serialize;

use crate::backbone::{ArchConfig, Family, Head, HeadConfig};
use crate::petl::{AdaptedModel, LoraScope, Method, PetlConfig};
use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CountReport {
    pub total_trainable: u64,
    pub per_group: BTreeMap<String, u64>,
    /// `total_trainable / (parameters of the used layers)`.
    pub ratio: f64,
    pub includes_head: bool,
}

impl CountReport {
    fn from_groups(per_group: BTreeMap<String, u64>, base_total: u64, includes_head: bool) -> Self {
        let total_trainable = per_group.values().sum();
        let ratio = if base_total == 0 {
            0.0
        } else {
            total_trainable as f64 / base_total as f64
        };
        Self {
            total_trainable,
            per_group,
            ratio,
            includes_head,
        }
    }
}

/// Parameters of one full encoder layer.
pub fn layer_params(arch: &ArchConfig) -> u64 {
    let d = arch.d_model as u64;
    let f = arch.ff_mult as u64;
    let attn = 4 * (d * d + d);
    let ff = 2 * f * d * d + f * d + d;
    match arch.family {
        Family::Transformer => attn + ff + 2 * 2 * d,
        Family::Conformer => {
            let k = arch.conv_kernel as u64;
            let conv = (2 * d * d + 2 * d) + (k * d + d) + 2 * d + (d * d + d);
            // five layer norms: ff1, attn, conv, ff2, final
            2 * ff + attn + conv + 5 * 2 * d
        }
    }
}

/// Trainable values one used layer contributes under `method`.
fn per_layer(arch: &ArchConfig, method: &Method) -> u64 {
    let d = arch.d_model as u64;
    let f = arch.ff_mult as u64;
    let conformer = arch.family == Family::Conformer;
    match *method {
        Method::Probing => 0,
        Method::FineTune => layer_params(arch),
        Method::Petl(cfg) => match cfg {
            PetlConfig::Adapter { bottleneck } => {
                let b = bottleneck as u64;
                2 * (2 * d + 2 * d * b + b + d)
            }
            PetlConfig::BitFit if conformer => (2 * f + 16) * d,
            PetlConfig::BitFit => (7 + f) * d,
            PetlConfig::Ssf if conformer => 2 * (2 * f + 9) * d,
            PetlConfig::Ssf => 2 * (5 + f) * d,
            PetlConfig::Lora { rank, scope } => {
                let r = rank as u64;
                match (scope, conformer) {
                    (LoraScope::Att, _) => 8 * r * d,
                    (LoraScope::All, false) => r * (10 + 2 * f) * d,
                    (LoraScope::All, true) => r * (17 + 4 * f) * d,
                }
            }
            PetlConfig::Prompt { .. } | PetlConfig::Prefix { .. } => 0,
        },
    }
}

/// Closed-form count for `method` on the first `use_layers` layers of `arch`.
pub fn predict_count(arch: &ArchConfig, method: &Method, use_layers: usize, head: Option<&HeadConfig>) -> CountReport {
    let d = arch.d_model as u64;
    let mut groups = BTreeMap::new();
    let each = per_layer(arch, method);
    if each > 0 {
        for i in 0..use_layers {
            groups.insert(format!("layer.{i}"), each);
        }
    }
    match *method {
        Method::Petl(PetlConfig::Prompt { n_prompts }) => {
            groups.insert("prompt".to_string(), n_prompts as u64 * d);
        }
        Method::Petl(PetlConfig::Prefix { n_prefix, mlp_hidden }) => {
            let n = n_prefix as u64;
            let h = mlp_hidden.unwrap_or(arch.d_model) as u64;
            let out = 2 * use_layers as u64 * d;
            groups.insert("prefix".to_string(), n * d + d * h + h + h * out + out);
        }
        _ => {}
    }
    if let Some(head) = head {
        groups.insert("head".to_string(), head.param_count(arch.d_model));
    }
    let base_total = layer_params(arch) * use_layers as u64;
    CountReport::from_groups(groups, base_total, head.is_some())
}

fn group_of(name: &str) -> String {
    match name.strip_prefix("layer.") {
        Some(rest) => format!("layer.{}", rest.split('.').next().unwrap_or_default()),
        None => name.split('.').next().unwrap_or_default().to_string(),
    }
}

/// Counts trainable values by walking the model's registries (and the head's
/// when given).
pub fn registry_count<T: Scalar>(model: &AdaptedModel<T>, head: Option<&Head<T>>) -> CountReport {
    let mut groups: BTreeMap<String, u64> = BTreeMap::new();
    let head_params = head.map(|h| h.params().trainable());
    for p in model.trainable().chain(head_params.into_iter().flatten()) {
        *groups.entry(group_of(&p.name)).or_default() += p.numel() as u64;
    }
    groups.retain(|_, v| *v > 0);
    let base = model.base();
    let base_total = (0..base.use_layers()).map(|i| base.layer_numel(i) as u64).sum();
    CountReport::from_groups(groups, base_total, head.is_some())
}

/// Registry count checked against [`predict_count`]. A merged model, or one
/// with a baked prefix, is expected to have nothing left to train.
pub fn audit<T: Scalar>(model: &AdaptedModel<T>, head: Option<&Head<T>>) -> Result<CountReport> {
    let base = model.base();
    let found = registry_count(model, head);
    let inference_form = model.merged() || model.prefix_bank().is_some_and(|b| b.baked.is_some());
    let method = if inference_form { Method::Probing } else { *model.method() };
    let predicted = predict_count(base.config(), &method, base.use_layers(), head.map(Head::config));
    let mut names: Vec<&String> = predicted.per_group.keys().chain(found.per_group.keys()).collect();
    names.sort();
    names.dedup();
    for group in names {
        let p = predicted.per_group.get(group).copied().unwrap_or(0);
        let f = found.per_group.get(group).copied().unwrap_or(0);
        if p != f {
            return Err(Error::CountMismatch {
                group: group.clone(),
                predicted: p,
                found: f,
            });
        }
    }
    Ok(found)
}

/// A published reference count for a base-sized architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Reported {
    pub family: Family,
    pub method: &'static str,
    pub value: u64,
    pub display: &'static str,
}

/// Reference counts for the 768-wide transformer and 1024-wide conformer
/// with six used layers and default hyper-parameters.
pub const REPORTED: [Reported; 16] = [
    Reported { family: Family::Conformer, method: "fine_tune", value: 180_000_000, display: "180M" },
    Reported { family: Family::Transformer, method: "fine_tune", value: 51_000_000, display: "51M" },
    Reported { family: Family::Conformer, method: "probing", value: 0, display: "0" },
    Reported { family: Family::Transformer, method: "probing", value: 0, display: "0" },
    Reported { family: Family::Conformer, method: "adapter", value: 657_696, display: "657696" },
    Reported { family: Family::Transformer, method: "adapter", value: 322_752, display: "322752" },
    Reported { family: Family::Conformer, method: "prompt", value: 65_536, display: "65536" },
    Reported { family: Family::Transformer, method: "prompt", value: 49_152, display: "49152" },
    Reported { family: Family::Conformer, method: "prefix", value: 9_649_152, display: "9649152" },
    Reported { family: Family::Transformer, method: "prefix", value: 7_385_088, display: "7385088" },
    Reported { family: Family::Conformer, method: "bitfit", value: 116_736, display: "116736" },
    Reported { family: Family::Transformer, method: "bitfit", value: 50_688, display: "50688" },
    Reported { family: Family::Conformer, method: "ssf", value: 190_464, display: "190464" },
    Reported { family: Family::Transformer, method: "ssf", value: 82_944, display: "82944" },
    Reported { family: Family::Conformer, method: "lora", value: 405_504, display: "405504" },
    Reported { family: Family::Transformer, method: "lora", value: 165_888, display: "165888" },
];

pub const PREFIX_NOTE: &str = "formula-normative; reported value not derivable";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComplexityRow {
    pub arch: String,
    pub method: String,
    pub hyperparams: String,
    pub trainable: u64,
    pub ratio: f64,
    /// Set when a reference count exists and differs from ours.
    pub annotation: Option<String>,
}

fn reference_for(arch: &ArchConfig, method: &Method, use_layers: usize) -> Option<&'static Reported> {
    let base = match arch.family {
        Family::Transformer => ArchConfig::transformer_base(),
        Family::Conformer => ArchConfig::conformer_base(),
    };
    let default = Method::table_rows().contains(method);
    if *arch != base || use_layers != 6 || !default {
        return None;
    }
    REPORTED
        .iter()
        .find(|r| r.family == arch.family && r.method == method.label())
}

/// The method × architecture count matrix, one row per pair.
pub fn complexity_table(archs: &[(String, ArchConfig)], methods: &[Method], use_layers: usize) -> Vec<ComplexityRow> {
    let mut rows = Vec::new();
    for (name, arch) in archs {
        for method in methods {
            let report = predict_count(arch, method, use_layers, None);
            let annotation = reference_for(arch, method, use_layers).and_then(|r| {
                if matches!(method, Method::Petl(PetlConfig::Prefix { .. })) {
                    Some(format!("{PREFIX_NOTE} (reported: {})", r.display))
                } else if r.value != report.total_trainable {
                    Some(format!("reported: {}", r.display))
                } else {
                    None
                }
            });
            rows.push(ComplexityRow {
                arch: name.clone(),
                method: method.label().to_string(),
                hyperparams: method.hyperparams(),
                trainable: report.total_trainable,
                ratio: report.ratio,
                annotation,
            });
        }
    }
    rows
}

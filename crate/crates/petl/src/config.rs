//! Experiment and sweep configuration files (TOML).

use std::path::{Path, PathBuf};

use petl_core::backbone::{ArchConfig, HeadConfig, DEFAULT_USE_LAYERS};
use petl_core::harness::{TaskSpec, TrainConfig, DEFAULT_RESAMPLES};
use petl_core::petl::{Method, PetlConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

fn default_use_layers() -> usize {
    DEFAULT_USE_LAYERS
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("petl-out")
}
fn default_resamples() -> usize {
    DEFAULT_RESAMPLES
}
fn default_dropout() -> f64 {
    0.5
}

/// Head shape; the output count and kind follow from the task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadOptions {
    /// Hidden width; defaults to `d_model`.
    #[serde(default)]
    pub hidden_dim: Option<usize>,
    #[serde(default = "default_dropout")]
    pub dropout_p: f64,
}

impl Default for HeadOptions {
    fn default() -> Self {
        Self {
            hidden_dim: None,
            dropout_p: default_dropout(),
        }
    }
}

/// One run: build, inject, train, evaluate, report, checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub arch: ArchConfig,
    #[serde(default = "default_use_layers")]
    pub use_layers: usize,
    pub method: Method,
    pub task: TaskSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub head: HeadOptions,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Seeds the backbone and head initialization.
    #[serde(default)]
    pub seed: u64,
    /// Repetitions for the timing probe; 0 skips timing.
    #[serde(default)]
    pub timing_reps: usize,
    #[serde(default = "default_resamples")]
    pub bootstrap_resamples: usize,
}

impl ExperimentConfig {
    pub fn head_config(&self) -> HeadConfig {
        HeadConfig {
            hidden_dim: self.head.hidden_dim,
            n_outputs: self.task.kind.n_outputs(),
            dropout_p: self.head.dropout_p,
            output_kind: self.task.kind.output_kind(),
        }
    }

    /// Checks every section and their cross-constraints. Runs before any
    /// model memory is allocated.
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.method.validate()?;
        self.task.validate()?;
        self.train.validate()?;
        self.head_config().validate()?;
        let schema = |field: &str, reason: String| Error::Schema {
            field: field.to_string(),
            reason,
        };
        if self.use_layers == 0 || self.use_layers > self.arch.n_layers {
            return Err(schema(
                "use_layers",
                format!("{} is outside 1..={}", self.use_layers, self.arch.n_layers),
            ));
        }
        if self.task.d_input != self.arch.d_model {
            return Err(schema(
                "task.d_input",
                format!("must equal arch.d_model = {}", self.arch.d_model),
            ));
        }
        let prompts = match self.method {
            Method::Petl(PetlConfig::Prompt { n_prompts }) => n_prompts,
            _ => 0,
        };
        if self.task.seq_len + prompts > self.arch.max_seq {
            return Err(schema(
                "task.seq_len",
                format!("{} frames plus {prompts} prompts exceed arch.max_seq", self.task.seq_len),
            ));
        }
        if let Method::Petl(PetlConfig::Lora { rank, .. }) = self.method {
            if rank > self.arch.d_model {
                return Err(schema("method.rank", format!("{rank} exceeds d_model")));
            }
        }
        if self.bootstrap_resamples > 0 && self.task.n_test < 2 {
            return Err(schema("task.n_test", "bootstrap needs at least 2 test examples".into()));
        }
        Ok(())
    }
}

/// A sweep: shared settings and one cell per method entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub arch: ArchConfig,
    #[serde(default = "default_use_layers")]
    pub use_layers: usize,
    pub task: TaskSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub head: HeadOptions,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub timing_reps: usize,
    #[serde(default = "default_resamples")]
    pub bootstrap_resamples: usize,
    #[serde(default)]
    pub methods: Vec<Method>,
}

impl GridConfig {
    /// The experiment of cell `index`, writing under `output_dir/cell-NN-label`.
    pub fn cell(&self, index: usize) -> ExperimentConfig {
        let method = self.methods[index];
        ExperimentConfig {
            arch: self.arch,
            use_layers: self.use_layers,
            method,
            task: self.task.clone(),
            train: self.train.clone(),
            head: self.head.clone(),
            output_dir: self.output_dir.join(format!("cell-{index:02}-{}", method.label())),
            seed: self.seed,
            timing_reps: self.timing_reps,
            bootstrap_resamples: self.bootstrap_resamples,
        }
    }
}

/// Parses TOML, reporting the dotted path of the first offending key.
pub fn parse<C: DeserializeOwned>(text: &str) -> Result<C> {
    let de = toml::Deserializer::new(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        Error::Schema {
            field: if field.is_empty() || field == "." {
                "<root>".into()
            } else {
                field
            },
            reason: e.into_inner().message().trim().to_string(),
        }
    })
}

pub fn read<C: DeserializeOwned>(path: &Path) -> Result<C> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text)
}

pub fn load_experiment(path: &Path) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = read(path)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_grid(path: &Path) -> Result<GridConfig> {
    let grid: GridConfig = read(path)?;
    for i in 0..grid.methods.len() {
        grid.cell(i).validate()?;
    }
    Ok(grid)
}

/// `transformer` / `conformer` for the base shapes, otherwise a TOML file
/// holding an `ArchConfig` table.
pub fn resolve_arch(spec: &str) -> Result<ArchConfig> {
    let arch = match spec {
        "transformer" => ArchConfig::transformer_base(),
        "conformer" => ArchConfig::conformer_base(),
        path => read(Path::new(path))?,
    };
    arch.validate()?;
    Ok(arch)
}

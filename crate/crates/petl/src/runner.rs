//! Experiment execution: single runs, sweeps and merges.

use std::path::{Path, PathBuf};
use std::time::Instant;

use petl_core::accounting::{self, CountReport};
use petl_core::backbone::{ArchConfig, Backbone, Head, Plain};
use petl_core::harness::{self, Clock, Dataset, EvalResult, History, Timing};
use petl_core::petl::{AdaptedModel, Method, PetlConfig};
use petl_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::checkpoint;
use crate::config::{ExperimentConfig, GridConfig};
use crate::report::{self, ReportRow};
use crate::{Error, Result};

/// Environment variable holding the sweep worker count.
pub const THREADS_ENV: &str = "PETL_THREADS";

pub struct WallClock(Instant);

impl Default for WallClock {
    fn default() -> Self {
        WallClock(Instant::now())
    }
}

impl Clock for WallClock {
    fn now_ns(&self) -> u64 {
        self.0.elapsed().as_nanos() as u64
    }
}

pub fn arch_label(arch: &ArchConfig) -> String {
    format!(
        "{}-d{}-l{}-h{}",
        arch.family.as_str(),
        arch.d_model,
        arch.n_layers,
        arch.n_heads
    )
}

#[derive(Debug, Clone, Serialize)]
pub struct RunOutcome {
    pub row: ReportRow,
    pub history: History,
    pub eval: EvalResult,
    pub counts: CountReport,
    pub timing: Option<Timing>,
}

fn build(cfg: &ExperimentConfig, method: Method) -> Result<(AdaptedModel<f32>, Head<f32>)> {
    let base = Backbone::<f32>::build(cfg.arch, cfg.seed)?.with_use_layers(cfg.use_layers)?;
    let model = AdaptedModel::inject(base, method)?;
    let head = Head::new(cfg.head_config(), cfg.arch.d_model, cfg.seed)?;
    Ok((model, head))
}

fn probe(cfg: &ExperimentConfig, model: &AdaptedModel<f32>, head: &Head<f32>, data: &Dataset) -> Result<Timing> {
    let batch_len = cfg.train.batch_size.min(data.train.len());
    Ok(harness::timing_probe(
        model,
        head,
        data,
        &data.train[..batch_len],
        cfg.timing_reps,
        &WallClock::default(),
    )?)
}

/// Runs one experiment without touching the filesystem.
pub fn execute(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let data = harness::generate_task(&cfg.task)?;
    let (model, head) = build(cfg, cfg.method)?;
    let counts = accounting::audit(&model, None)?;
    log::info!(
        "{} on {}: {} trainable parameters",
        cfg.method.label(),
        arch_label(&cfg.arch),
        counts.total_trainable
    );
    let history = harness::train(&model, &head, &data, &cfg.train)?;
    log::info!(
        "train loss {:.4} -> {:.4} in {} steps",
        history.initial_train_loss,
        history.final_train_loss,
        history.steps_run
    );
    let eval = harness::evaluate(&model, &head, &data, &data.test, cfg.bootstrap_resamples, cfg.seed)?;

    let (timing, ratios) = if cfg.timing_reps > 0 {
        let own = probe(cfg, &model, &head, &data)?;
        let (ft_model, ft_head) = build(cfg, Method::FineTune)?;
        let reference = probe(cfg, &ft_model, &ft_head, &data)?;
        (Some(own), Some(own.ratio_to(&reference)))
    } else {
        (None, None)
    };

    let row = ReportRow {
        method: cfg.method.label().to_string(),
        arch: arch_label(&cfg.arch),
        use_layers: cfg.use_layers,
        hyperparams: cfg.method.hyperparams(),
        trainable_params: counts.total_trainable,
        metric_name: eval.metric_name.clone(),
        value: eval.value,
        ci_low: eval.ci_low,
        ci_high: eval.ci_high,
        train_ms_per_step_ratio: ratios.map(|r| r.0),
        infer_ratio: ratios.map(|r| r.1),
        seed: cfg.seed,
    };
    let outcome = RunOutcome {
        row,
        history,
        eval,
        counts,
        timing,
    };
    write_outputs(cfg, &model, &head, &outcome)?;
    Ok(outcome)
}

fn write_outputs(cfg: &ExperimentConfig, model: &AdaptedModel<f32>, head: &Head<f32>, outcome: &RunOutcome) -> Result<()> {
    let dir = &cfg.output_dir;
    report::emit(std::slice::from_ref(&outcome.row), dir)?;
    checkpoint::save_delta(model, &dir.join("delta.petl"))?;
    checkpoint::save_head(head, &cfg.arch, &dir.join("head.petl"))?;
    let history = dir.join("history.json");
    let json = serde_json::to_string_pretty(&outcome.history).map_err(|e| Error::Report(e.to_string()))?;
    std::fs::write(&history, json).map_err(|e| Error::io(&history, e))?;
    let resolved = dir.join("config.toml");
    let text = toml::to_string(cfg).map_err(|e| Error::Report(e.to_string()))?;
    std::fs::write(&resolved, text).map_err(|e| Error::io(&resolved, e))
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    /// One row per cell in grid order; failed cells carry metric `error`.
    pub rows: Vec<ReportRow>,
    pub failures: Vec<(usize, String)>,
}

fn thread_count() -> Option<usize> {
    std::env::var(THREADS_ENV).ok()?.parse().ok().filter(|&n| n > 0)
}

/// Runs every cell (in parallel when the worker pool allows) and assembles
/// the rows in grid order. A failing cell is recorded and the sweep goes on.
pub fn sweep(grid: &GridConfig) -> Result<SweepOutcome> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_count() {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| Error::Report(e.to_string()))?;
    let results: Vec<Result<RunOutcome>> =
        pool.install(|| (0..grid.methods.len()).into_par_iter().map(|i| execute(&grid.cell(i))).collect());

    let mut rows = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for (i, result) in results.into_iter().enumerate() {
        match result {
            Ok(outcome) => rows.push(outcome.row),
            Err(e) => {
                let cell = grid.cell(i);
                log::error!("cell {i} ({}) failed: {e}", cell.method.label());
                let predicted = accounting::predict_count(&cell.arch, &cell.method, cell.use_layers, None);
                rows.push(ReportRow {
                    method: cell.method.label().to_string(),
                    arch: arch_label(&cell.arch),
                    use_layers: cell.use_layers,
                    hyperparams: cell.method.hyperparams(),
                    trainable_params: predicted.total_trainable,
                    metric_name: "error".into(),
                    value: f64::NAN,
                    ci_low: f64::NAN,
                    ci_high: f64::NAN,
                    train_ms_per_step_ratio: None,
                    infer_ratio: None,
                    seed: cell.seed,
                });
                failures.push((i, e.to_string()));
            }
        }
    }
    std::fs::create_dir_all(&grid.output_dir).map_err(|e| Error::io(&grid.output_dir, e))?;
    let csv_path = grid.output_dir.join("sweep.csv");
    std::fs::write(&csv_path, report::to_csv(&rows)?).map_err(|e| Error::io(&csv_path, e))?;
    let txt_path = grid.output_dir.join("sweep.txt");
    std::fs::write(&txt_path, report::rows_text(&rows)).map_err(|e| Error::io(&txt_path, e))?;
    Ok(SweepOutcome { rows, failures })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeOutcome {
    pub method: Method,
    /// Largest output change on a random probe input.
    pub max_abs_diff: f64,
    /// Registry structure equals the plain backbone's.
    pub structure_preserved: bool,
    pub output: PathBuf,
}

/// Loads a delta onto a freshly built `arch` base and folds it into
/// inference form: SSF and LoRA are merged into the weights (written as a
/// full checkpoint), a prefix bank is baked (written as a delta).
pub fn merge(ckpt: &Path, arch: &ArchConfig, seed: u64, out: &Path) -> Result<MergeOutcome> {
    let base = Backbone::<f32>::build(*arch, seed)?;
    let structure = base.params().structure();
    let mut model = checkpoint::load_delta(base, ckpt)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = 16.min(arch.max_seq);
    let x: Vec<f64> = (0..t * arch.d_model).map(|_| StandardNormal.sample(&mut rng)).collect();
    let x = Tensor::<f32>::from_f64(&x, &[t, arch.d_model])?;
    let before = model.forward_features(&x)?.to_vec();
    let method = *model.method();
    match method {
        Method::Petl(PetlConfig::Ssf) => model.merge_ssf()?,
        Method::Petl(PetlConfig::Lora { .. }) => model.merge_lora()?,
        Method::Petl(PetlConfig::Prefix { .. }) => model.bake_prefix()?,
        other => {
            return Err(petl_core::Error::Contract(format!("{} has no inference-time merge", other.label())).into());
        }
    }
    let after = if model.merged() {
        model.base().forward_features(&x, &Plain)?.to_vec()
    } else {
        model.forward_features(&x)?.to_vec()
    };
    let max_abs_diff = before
        .iter()
        .zip(&after)
        .map(|(a, b)| (*a as f64 - *b as f64).abs())
        .fold(0.0, f64::max);
    if model.merged() {
        checkpoint::save_full(&model, out)?;
    } else {
        checkpoint::save_delta(&model, out)?;
    }
    Ok(MergeOutcome {
        method,
        max_abs_diff,
        structure_preserved: model.base().params().structure() == structure,
        output: out.to_path_buf(),
    })
}

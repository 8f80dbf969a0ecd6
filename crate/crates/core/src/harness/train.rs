use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::bootstrap::{bootstrap_ci, DEFAULT_LEVEL};
use super::metrics::{self, Key};
use super::task::{Batcher, Dataset, Example, Label, TaskKind, TEMPO_REF};
use crate::backbone::Head;
use crate::init::splitmix64;
use crate::petl::{AdaptedModel, Method, Session};
use crate::tensor::{AdamW, AdamWConfig, ParamGroup};
use crate::{Error, Result, Scalar, Tensor};

fn d_steps() -> usize {
    500
}
fn d_batch() -> usize {
    8
}
fn d_lr() -> f64 {
    1e-3
}
fn d_lr_ft() -> f64 {
    1e-5
}
fn d_wd() -> f64 {
    1e-2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_steps")]
    pub steps: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    /// Injected parameters and BitFit biases.
    #[serde(default = "d_lr")]
    pub lr_petl: f64,
    #[serde(default = "d_lr")]
    pub lr_head: f64,
    /// Backbone weights under full fine-tuning.
    #[serde(default = "d_lr_ft")]
    pub lr_ft: f64,
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
    /// Validation interval in steps; 0 disables intermediate evaluation.
    #[serde(default)]
    pub eval_every: usize,
    #[serde(default)]
    pub seed: u64,
    /// Stop after this many evaluations without improvement; 0 disables.
    #[serde(default)]
    pub early_stop_patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: d_steps(),
            batch_size: d_batch(),
            lr_petl: d_lr(),
            lr_head: d_lr(),
            lr_ft: d_lr_ft(),
            weight_decay: d_wd(),
            eval_every: 0,
            seed: 0,
            early_stop_patience: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("train.steps", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("train.batch_size", "must be at least 1"));
        }
        for (field, lr) in [
            ("train.lr_petl", self.lr_petl),
            ("train.lr_head", self.lr_head),
            ("train.lr_ft", self.lr_ft),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::invalid(field, "must be positive"));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid("train.weight_decay", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct History {
    /// Mini-batch loss per step, with dropout active.
    pub step_losses: Vec<f64>,
    /// Mean train-set loss in eval mode before the first step.
    pub initial_train_loss: f64,
    pub final_train_loss: f64,
    /// `(step, validation metric)` pairs.
    pub evals: Vec<(usize, f64)>,
    pub steps_run: usize,
}

pub(crate) fn input<T: Scalar>(spec_seq: usize, d: usize, ex: &Example) -> Result<Tensor<T>> {
    Tensor::from_f64(&ex.x, &[spec_seq, d])
}

/// Scalar loss of one example: sigmoid cross-entropy for tags, softmax
/// cross-entropy for classes, squared error on `ln(bpm / 120)` for tempo.
pub(crate) fn example_loss<T: Scalar>(logits: &Tensor<T>, label: &Label) -> Result<Tensor<T>> {
    match label {
        Label::Tags(tags) => {
            let t: Vec<T> = tags.iter().map(|&b| if b { T::one() } else { T::zero() }).collect();
            logits.bce_with_logits(&t)
        }
        Label::Class(c) => logits.cross_entropy(*c),
        Label::Tempo(bpm) => logits.mse(&[T::from_f64(libm::log(bpm / TEMPO_REF))]),
    }
}

/// Forward pass of model and head for one example.
pub fn logits<T: Scalar>(
    session: &Session<'_, T>,
    model: &AdaptedModel<T>,
    head: &Head<T>,
    data: &Dataset,
    ex: &Example,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<T>> {
    let x = input(data.spec.seq_len, data.spec.d_input, ex)?;
    let features = session.forward_features(&x)?;
    head.forward(&features, model.prompt_count(), training, rng)
}

/// Mean eval-mode loss over `examples`.
pub fn mean_loss<T: Scalar>(
    model: &AdaptedModel<T>,
    head: &Head<T>,
    data: &Dataset,
    examples: &[Example],
) -> Result<f64> {
    let session = model.session()?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut total = 0.0;
    for ex in examples {
        let out = logits(&session, model, head, data, ex, false, &mut rng)?;
        total += example_loss(&out, &ex.label)?.item().to_f64();
    }
    Ok(total / examples.len().max(1) as f64)
}

/// Trains `model` and `head` in place with AdamW. Parameter groups: head at
/// `lr_head`, injected parameters at `lr_petl`, trainable backbone
/// parameters at `lr_ft` under fine-tuning and `lr_petl` otherwise.
///
/// Deterministic for a fixed `cfg.seed`.
pub fn train<T: Scalar>(model: &AdaptedModel<T>, head: &Head<T>, data: &Dataset, cfg: &TrainConfig) -> Result<History> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::invalid("task.n_train", "must be at least 1"));
    }
    let base_lr = if *model.method() == Method::FineTune {
        cfg.lr_ft
    } else {
        cfg.lr_petl
    };
    let mut optim = AdamW::<T>::new(AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    });
    let mut batcher = Batcher::new(data.train.len(), cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed ^ 0x0d20_f0a7));

    let mut history = History {
        initial_train_loss: mean_loss(model, head, data, &data.train)?,
        ..History::default()
    };
    if !history.initial_train_loss.is_finite() {
        return Err(Error::Divergence {
            step: 0,
            loss: history.initial_train_loss,
        });
    }
    let (mut best, mut stale) = (f64::NEG_INFINITY, 0);
    for step in 1..=cfg.steps {
        let batch = batcher.next_batch(cfg.batch_size);
        let session = model.session()?;
        let mut total: Option<Tensor<T>> = None;
        for &i in &batch {
            let ex = &data.train[i];
            let out = logits(&session, model, head, data, ex, true, &mut rng)?;
            let l = example_loss(&out, &ex.label)?;
            total = Some(match total {
                Some(acc) => acc.add(&l)?,
                None => l,
            });
        }
        let loss = total
            .ok_or_else(|| Error::contract("empty batch"))?
            .scale(1.0 / batch.len() as f64);
        let value = loss.item().to_f64();
        if !value.is_finite() {
            return Err(Error::Divergence { step, loss: value });
        }
        loss.backward()?;
        drop(session);
        let groups = [
            ParamGroup {
                lr: cfg.lr_head,
                params: head.params().trainable().collect(),
            },
            ParamGroup {
                lr: cfg.lr_petl,
                params: model.injected().trainable().collect(),
            },
            ParamGroup {
                lr: base_lr,
                params: model.base().params().trainable().collect(),
            },
        ];
        optim.step(&groups)?;
        history.step_losses.push(value);
        history.steps_run = step;

        if cfg.eval_every > 0 && step % cfg.eval_every == 0 && data.val.len() >= 2 {
            let metric = evaluate(model, head, data, &data.val, 0, 0)?.value;
            history.evals.push((step, metric));
            if metric > best {
                best = metric;
                stale = 0;
            } else {
                stale += 1;
                if cfg.early_stop_patience > 0 && stale >= cfg.early_stop_patience {
                    break;
                }
            }
        }
    }
    history.final_train_loss = mean_loss(model, head, data, &data.train)?;
    if !history.final_train_loss.is_finite() {
        return Err(Error::Divergence {
            step: history.steps_run,
            loss: history.final_train_loss,
        });
    }
    Ok(history)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Predictions {
    /// Per-example tag probabilities.
    Scores(Vec<Vec<f64>>),
    Classes(Vec<usize>),
    /// Per-example tempo in BPM.
    Tempo(Vec<f64>),
}

pub fn predict<T: Scalar>(model: &AdaptedModel<T>, head: &Head<T>, data: &Dataset, examples: &[Example]) -> Result<Predictions> {
    let session = model.session()?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut outs = Vec::with_capacity(examples.len());
    for ex in examples {
        let out = logits(&session, model, head, data, ex, false, &mut rng)?;
        outs.push(out.to_vec().into_iter().map(Scalar::to_f64).collect::<Vec<f64>>());
    }
    Ok(match data.spec.kind {
        TaskKind::Tagging => Predictions::Scores(
            outs.into_iter()
                .map(|o| o.into_iter().map(|z| 1.0 / (1.0 + libm::exp(-z))).collect())
                .collect(),
        ),
        TaskKind::Genre | TaskKind::Key => Predictions::Classes(
            outs.iter()
                .map(|o| {
                    let mut best = 0;
                    for (i, v) in o.iter().enumerate() {
                        if *v > o[best] {
                            best = i;
                        }
                    }
                    best
                })
                .collect(),
        ),
        TaskKind::Tempo => Predictions::Tempo(outs.iter().map(|o| TEMPO_REF * libm::exp(o[0])).collect()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalResult {
    pub metric_name: String,
    pub value: f64,
    /// Per-example contributions to `value`; empty for mAP, which is not a
    /// per-example mean.
    pub per_example_scores: Vec<f64>,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Task metric on `examples` with a percentile bootstrap interval.
/// `resamples = 0` skips the bootstrap and reports a zero-width interval.
pub fn evaluate<T: Scalar>(
    model: &AdaptedModel<T>,
    head: &Head<T>,
    data: &Dataset,
    examples: &[Example],
    resamples: usize,
    seed: u64,
) -> Result<EvalResult> {
    let preds = predict(model, head, data, examples)?;
    let kind = data.spec.kind;
    let (value, per_example, ci) = match preds {
        Predictions::Scores(scores) => {
            let labels: Vec<Vec<bool>> = examples
                .iter()
                .map(|e| match &e.label {
                    Label::Tags(t) => Ok(t.clone()),
                    _ => Err(Error::contract("tagging task with non-tag label")),
                })
                .collect::<Result<_>>()?;
            let value = metrics::map_metric(&scores, &labels)?;
            let ci = if resamples > 0 {
                Some(bootstrap_ci(
                    examples.len(),
                    |idx| {
                        let s: Vec<Vec<f64>> = idx.iter().map(|&i| scores[i].clone()).collect();
                        let l: Vec<Vec<bool>> = idx.iter().map(|&i| labels[i].clone()).collect();
                        metrics::map_metric(&s, &l).unwrap_or(0.0)
                    },
                    resamples,
                    DEFAULT_LEVEL,
                    seed,
                )?)
            } else {
                None
            };
            (value, Vec::new(), ci)
        }
        Predictions::Classes(classes) => {
            let scores: Vec<f64> = classes
                .iter()
                .zip(examples)
                .map(|(&p, e)| match (&e.label, kind) {
                    (Label::Class(t), TaskKind::Key) => Ok(metrics::key_score(Key::from_class(p)?, Key::from_class(*t)?)),
                    (Label::Class(t), _) => Ok((p == *t) as u8 as f64),
                    _ => Err(Error::contract("classification task with non-class label")),
                })
                .collect::<Result<_>>()?;
            mean_with_ci(scores, resamples, seed)?
        }
        Predictions::Tempo(bpm) => {
            let scores: Vec<f64> = bpm
                .iter()
                .zip(examples)
                .map(|(&p, e)| match e.label {
                    Label::Tempo(t) => Ok(metrics::tempo_correct(p, t)? as u8 as f64),
                    _ => Err(Error::contract("tempo task with non-tempo label")),
                })
                .collect::<Result<_>>()?;
            mean_with_ci(scores, resamples, seed)?
        }
    };
    let (lo, hi) = ci.unwrap_or((value, value));
    Ok(EvalResult {
        metric_name: kind.metric_name().to_string(),
        value,
        per_example_scores: per_example,
        ci_low: lo.min(value),
        ci_high: hi.max(value),
    })
}

type Scored = (f64, Vec<f64>, Option<(f64, f64)>);

fn mean_with_ci(scores: Vec<f64>, resamples: usize, seed: u64) -> Result<Scored> {
    let value = scores.iter().sum::<f64>() / scores.len().max(1) as f64;
    let ci = if resamples > 0 {
        Some(super::bootstrap::bootstrap_mean(&scores, resamples, DEFAULT_LEVEL, seed)?)
    } else {
        None
    };
    Ok((value, scores, ci))
}

/// Expected accuracy of guessing on a `kind` task: `1 / classes`.
pub fn chance_accuracy(kind: TaskKind) -> Option<f64> {
    match kind {
        TaskKind::Genre | TaskKind::Key => Some(1.0 / kind.n_outputs() as f64),
        _ => None,
    }
}

use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backbone::OutputKind;
use crate::init::splitmix64;
use crate::{Error, Result};

/// Fraction of examples carrying each tag.
const TAG_PREVALENCE_Z: f64 = 0.85;
pub const TEMPO_MIN: f64 = 60.0;
pub const TEMPO_MAX: f64 = 180.0;
/// Regression targets are `ln(bpm / TEMPO_REF)`.
pub const TEMPO_REF: f64 = 120.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    /// 50 binary tags.
    Tagging,
    /// 10 classes.
    Genre,
    /// 24 classes: 12 tonics × {major, minor}.
    Key,
    /// Regression on tempo in BPM.
    Tempo,
}

impl TaskKind {
    pub fn n_outputs(self) -> usize {
        match self {
            TaskKind::Tagging => 50,
            TaskKind::Genre => 10,
            TaskKind::Key => 24,
            TaskKind::Tempo => 1,
        }
    }

    pub fn output_kind(self) -> OutputKind {
        match self {
            TaskKind::Tagging => OutputKind::Multilabel,
            TaskKind::Genre | TaskKind::Key => OutputKind::Multiclass,
            TaskKind::Tempo => OutputKind::Regression,
        }
    }

    pub fn metric_name(self) -> &'static str {
        match self {
            TaskKind::Tagging => "map",
            TaskKind::Genre => "accuracy",
            TaskKind::Key => "key_weighted_accuracy",
            TaskKind::Tempo => "tempo_acc1",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Tagging => "tagging",
            TaskKind::Genre => "genre",
            TaskKind::Key => "key",
            TaskKind::Tempo => "tempo",
        }
    }
}

fn default_seq_len() -> usize {
    16
}
fn default_d_input() -> usize {
    32
}
fn default_n_train() -> usize {
    256
}
fn default_n_val() -> usize {
    64
}
fn default_n_test() -> usize {
    256
}
fn default_rank() -> usize {
    8
}
fn default_noise() -> f64 {
    1.0
}

/// A synthetic downstream task. Inputs come from a seeded latent code lifted
/// into `d_input` dimensions by a fixed random map of rank `planted_rank`;
/// labels are a function of that code. With `planted_rank = 0` labels are
/// drawn independently of the inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    #[serde(default = "default_seq_len")]
    pub seq_len: usize,
    #[serde(default = "default_d_input")]
    pub d_input: usize,
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    #[serde(default = "default_n_val")]
    pub n_val: usize,
    #[serde(default = "default_n_test")]
    pub n_test: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_rank")]
    pub planted_rank: usize,
    /// Per-frame Gaussian noise added on top of the planted signal.
    #[serde(default = "default_noise")]
    pub noise_std: f64,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, d_input: usize) -> Self {
        Self {
            kind,
            seq_len: default_seq_len(),
            d_input,
            n_train: default_n_train(),
            n_val: default_n_val(),
            n_test: default_n_test(),
            seed: 0,
            planted_rank: default_rank(),
            noise_std: default_noise(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 {
            return Err(Error::invalid("task.seq_len", "must be at least 1"));
        }
        if self.d_input == 0 {
            return Err(Error::invalid("task.d_input", "must be at least 1"));
        }
        if self.n_train == 0 {
            return Err(Error::invalid("task.n_train", "must be at least 1"));
        }
        if self.n_test < 2 {
            return Err(Error::invalid("task.n_test", "must be at least 2"));
        }
        if self.planted_rank > self.d_input {
            return Err(Error::invalid("task.planted_rank", "must not exceed d_input"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::invalid("task.noise_std", "must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Label {
    Tags(Vec<bool>),
    Class(usize),
    /// Beats per minute.
    Tempo(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    /// Row-major `[seq_len, d_input]`.
    pub x: Vec<f64>,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// `z · Q / sqrt(r)` for latent `z: [r]` and map `q: [r, d]`.
fn lift(z: &[f64], q: &[f64], d: usize) -> Vec<f64> {
    let r = z.len();
    let mut out = alloc::vec![0.0; d];
    for (zi, row) in z.iter().zip(q.chunks(d)) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += zi * v;
        }
    }
    let s = libm::sqrt(r.max(1) as f64);
    out.iter_mut().for_each(|o| *o /= s);
    out
}

/// Generates train/val/test splits from one seeded stream, so the splits are
/// disjoint draws and regeneration is bit-identical.
pub fn generate_task(spec: &TaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let (d, r, t) = (spec.d_input, spec.planted_rank, spec.seq_len);
    let mut teacher = ChaCha8Rng::seed_from_u64(splitmix64(spec.seed));
    let mut stream = ChaCha8Rng::seed_from_u64(splitmix64(spec.seed ^ 0x5eed_da7a));
    let q = gaussian(&mut teacher, r * d);
    let n_classes = spec.kind.n_outputs();
    let codes = gaussian(&mut teacher, n_classes * r);
    let tag_dirs = gaussian(&mut teacher, n_classes * r);

    let frames = |rng: &mut ChaCha8Rng, mean: &[f64]| -> Vec<f64> {
        let mut x = Vec::with_capacity(t * d);
        for _ in 0..t {
            for m in mean {
                let e: f64 = StandardNormal.sample(rng);
                x.push(m + spec.noise_std * e);
            }
        }
        x
    };

    let total = spec.n_train + spec.n_val + spec.n_test;
    let mut examples = Vec::with_capacity(total);
    for _ in 0..total {
        let example = match spec.kind {
            TaskKind::Genre | TaskKind::Key => {
                let y = stream.random_range(0..n_classes);
                let mean = lift(&codes[y * r..(y + 1) * r], &q, d);
                Example {
                    x: frames(&mut stream, &mean),
                    label: Label::Class(y),
                }
            }
            TaskKind::Tagging => {
                let z = gaussian(&mut stream, r);
                let tags = if r == 0 {
                    (0..n_classes).map(|_| stream.random_bool(0.2)).collect()
                } else {
                    tag_dirs
                        .chunks(r)
                        .map(|p| {
                            let norm = libm::sqrt(p.iter().map(|v| v * v).sum::<f64>());
                            p.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>() / norm > TAG_PREVALENCE_Z
                        })
                        .collect()
                };
                let mean = lift(&z, &q, d);
                Example {
                    x: frames(&mut stream, &mean),
                    label: Label::Tags(tags),
                }
            }
            TaskKind::Tempo => {
                let bpm = stream.random_range(TEMPO_MIN..TEMPO_MAX);
                let phase = stream.random_range(0.0..2.0 * PI);
                let amp = if r == 0 { 0.0 } else { libm::sqrt(2.0) };
                // each frame is a window of d samples; bpm / 30 cycles per window
                let cycles = bpm / 30.0;
                let mut x = Vec::with_capacity(t * d);
                for f in 0..t {
                    for j in 0..d {
                        let pos = f as f64 + j as f64 / d as f64;
                        let e: f64 = StandardNormal.sample(&mut stream);
                        x.push(amp * libm::cos(2.0 * PI * cycles * pos + phase) + spec.noise_std * e);
                    }
                }
                Example {
                    x,
                    label: Label::Tempo(bpm),
                }
            }
        };
        examples.push(example);
    }
    let test = examples.split_off(spec.n_train + spec.n_val);
    let val = examples.split_off(spec.n_train);
    Ok(Dataset {
        spec: spec.clone(),
        train: examples,
        val,
        test,
    })
}

/// Epoch-wise shuffled mini-batches of training indices.
#[derive(Debug, Clone)]
pub struct Batcher {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Batcher {
    pub fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0xba7c_4e55));
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self { order, pos: 0, rng }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size && !self.order.is_empty() {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

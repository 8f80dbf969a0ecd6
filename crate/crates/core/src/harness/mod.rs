//! Synthetic downstream tasks, the training loop, evaluation metrics,
//! bootstrap intervals and timing.

mod bootstrap;
pub mod metrics;
mod task;
mod timing;
mod train;

pub use bootstrap::{bootstrap_ci, bootstrap_mean, DEFAULT_LEVEL, DEFAULT_RESAMPLES};
pub use metrics::{Key, Mode};
pub use task::{generate_task, Batcher, Dataset, Example, Label, TaskKind, TaskSpec, TEMPO_MAX, TEMPO_MIN, TEMPO_REF};
pub use timing::{timing_probe, Clock, Timing, MIN_REPS};
pub use train::{chance_accuracy, evaluate, logits, mean_loss, predict, train, EvalResult, History, Predictions, TrainConfig};

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::task::{Dataset, Example};
use super::train::{example_loss, logits};
use crate::backbone::Head;
use crate::petl::AdaptedModel;
use crate::{Error, Result, Scalar, Tensor};

pub const MIN_REPS: usize = 20;

/// Monotonic time source. The std crate supplies a wall clock; tests can use
/// a fake one.
pub trait Clock {
    fn now_ns(&self) -> u64;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Timing {
    pub train_ms_per_step: f64,
    pub infer_ms_per_example: f64,
}

impl Timing {
    /// Both times divided by `reference` (normally the fine-tuning preset).
    pub fn ratio_to(&self, reference: &Timing) -> (f64, f64) {
        (
            self.train_ms_per_step / reference.train_ms_per_step,
            self.infer_ms_per_example / reference.infer_ms_per_example,
        )
    }
}

fn median(mut v: Vec<u64>) -> f64 {
    v.sort_unstable();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2] as f64
    } else {
        (v[n / 2 - 1] + v[n / 2]) as f64 / 2.0
    }
}

/// Median wall-clock cost of a training step (forward and backward over
/// `batch`, no optimizer update, parameters unchanged) and of a single
/// eval-mode forward, over at least [`MIN_REPS`] repetitions each after one
/// warm-up.
pub fn timing_probe<T: Scalar>(
    model: &AdaptedModel<T>,
    head: &Head<T>,
    data: &Dataset,
    batch: &[Example],
    reps: usize,
    clock: &dyn Clock,
) -> Result<Timing> {
    if batch.is_empty() {
        return Err(Error::invalid("timing.batch", "needs at least one example"));
    }
    let reps = reps.max(MIN_REPS);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut train = Vec::with_capacity(reps);
    for rep in 0..=reps {
        let start = clock.now_ns();
        let session = model.session()?;
        let mut total: Option<Tensor<T>> = None;
        for ex in batch {
            let l = example_loss(&logits(&session, model, head, data, ex, true, &mut rng)?, &ex.label)?;
            total = Some(match total {
                Some(acc) => acc.add(&l)?,
                None => l,
            });
        }
        if let Some(total) = total {
            total.backward()?;
        }
        let end = clock.now_ns();
        drop(session);
        model.zero_grad();
        head.params().zero_grad();
        if rep > 0 {
            train.push(end.saturating_sub(start));
        }
    }
    let mut infer = Vec::with_capacity(reps);
    for rep in 0..=reps {
        let ex = &batch[rep % batch.len()];
        let start = clock.now_ns();
        let session = model.session()?;
        let _ = logits(&session, model, head, data, ex, false, &mut rng)?;
        let end = clock.now_ns();
        if rep > 0 {
            infer.push(end.saturating_sub(start));
        }
    }
    Ok(Timing {
        train_ms_per_step: median(train) / 1e6,
        infer_ms_per_example: median(infer) / 1e6,
    })
}

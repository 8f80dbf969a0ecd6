use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::init::splitmix64;
use crate::{Error, Result};

pub const DEFAULT_RESAMPLES: usize = 1000;
pub const DEFAULT_LEVEL: f64 = 0.95;

/// Linear-interpolated quantile of sorted values.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = libm::floor(pos) as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Percentile bootstrap interval of `statistic` over `n` examples.
///
/// `statistic` receives the resampled example indices. Resample `b` draws
/// from its own generator seeded by `(seed, b)`, so results do not depend on
/// evaluation order.
pub fn bootstrap_ci<F>(n: usize, statistic: F, resamples: usize, level: f64, seed: u64) -> Result<(f64, f64)>
where
    F: Fn(&[usize]) -> f64,
{
    if n < 2 {
        return Err(Error::invalid("bootstrap", "needs at least two examples"));
    }
    if resamples == 0 || !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid("bootstrap", "resamples ≥ 1 and level in (0, 1) required"));
    }
    let mut stats: Vec<f64> = (0..resamples)
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(b as u64)));
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            statistic(&idx)
        })
        .collect();
    stats.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Ok((quantile(&stats, tail), quantile(&stats, 1.0 - tail)))
}

/// Interval of the mean of per-example scores.
pub fn bootstrap_mean(scores: &[f64], resamples: usize, level: f64, seed: u64) -> Result<(f64, f64)> {
    bootstrap_ci(
        scores.len(),
        |idx| idx.iter().map(|&i| scores[i]).sum::<f64>() / idx.len() as f64,
        resamples,
        level,
        seed,
    )
}

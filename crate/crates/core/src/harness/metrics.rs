//! Evaluation metrics. Every metric is a mean over examples or tags and lies
//! in `[0, 1]`.

use alloc::format;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::{Error, Result};

/// Relative tolerance of tempo Accuracy 1.
pub const TEMPO_TOLERANCE: f64 = 0.04;

/// Average precision of one tag. Tied scores are grouped, so AP is invariant
/// to the order of tied examples. `None` when the tag has no positives.
pub fn average_precision(scores: &[f64], truth: &[bool]) -> Option<f64> {
    let positives = truth.iter().filter(|&&t| t).count();
    if positives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    let (mut tp, mut seen, mut ap) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let mut group_tp = 0;
        while i < order.len() && scores[order[i]] == s {
            group_tp += truth[order[i]] as usize;
            seen += 1;
            i += 1;
        }
        tp += group_tp;
        ap += (group_tp as f64 / positives as f64) * (tp as f64 / seen as f64);
    }
    Some(ap)
}

/// Macro mAP over tags. `scores` and `labels` are per example, one entry per
/// tag. Tags without a positive example are left out of the average.
pub fn map_metric(scores: &[Vec<f64>], labels: &[Vec<bool>]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::invalid("labels", "one label row per score row"));
    }
    let n_tags = labels.first().map_or(0, Vec::len);
    if scores.iter().any(|s| s.len() != n_tags) || labels.iter().any(|l| l.len() != n_tags) {
        return Err(Error::invalid("labels", "ragged score or label rows"));
    }
    let mut total = 0.0;
    let mut counted = 0;
    for tag in 0..n_tags {
        let s: Vec<f64> = scores.iter().map(|r| r[tag]).collect();
        let t: Vec<bool> = labels.iter().map(|r| r[tag]).collect();
        if let Some(ap) = average_precision(&s, &t) {
            total += ap;
            counted += 1;
        }
    }
    if counted == 0 {
        return Err(Error::invalid("labels", "no tag has a positive example"));
    }
    Ok(total / counted as f64)
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::invalid("predictions", "need equal, non-zero lengths"));
    }
    Ok(pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / pred.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Major,
    Minor,
}

/// A musical key: tonic pitch class `0..12` (0 = C) and mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Key {
    pub tonic: u8,
    pub mode: Mode,
}

impl Key {
    pub fn new(tonic: u8, mode: Mode) -> Result<Self> {
        if tonic >= 12 {
            return Err(Error::invalid("key.tonic", format!("{tonic} is not a pitch class")));
        }
        Ok(Self { tonic, mode })
    }

    /// Class `k` of the 24-way key task: tonic `k % 12`, major below 12.
    pub fn from_class(k: usize) -> Result<Self> {
        if k >= 24 {
            return Err(Error::invalid("key", format!("class {k} is outside 0..24")));
        }
        let mode = if k < 12 { Mode::Major } else { Mode::Minor };
        Self::new((k % 12) as u8, mode)
    }
}

/// Partial-credit score of an estimated key against the reference:
/// 1.0 exact, 0.5 a fifth above in the same mode, 0.3 relative
/// major/minor, 0.2 parallel (same tonic, other mode), else 0.
pub fn key_score(est: Key, reference: Key) -> f64 {
    let up = (est.tonic + 12 - reference.tonic) % 12;
    match (reference.mode, est.mode) {
        _ if est == reference => 1.0,
        (r, e) if r == e && up == 7 => 0.5,
        (Mode::Major, Mode::Minor) if up == 9 => 0.3,
        (Mode::Minor, Mode::Major) if up == 3 => 0.3,
        (r, e) if r != e && up == 0 => 0.2,
        _ => 0.0,
    }
}

pub fn key_weighted_accuracy(pred: &[Key], truth: &[Key]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::invalid("predictions", "need equal, non-zero lengths"));
    }
    for k in pred.iter().chain(truth) {
        Key::new(k.tonic, k.mode)?;
    }
    Ok(pred.iter().zip(truth).map(|(&p, &t)| key_score(p, t)).sum::<f64>() / pred.len() as f64)
}

/// Whether `pred` is within 4% of `truth`, boundary included. A relative
/// slack of 1e-12 absorbs the rounding in `0.04 * truth`.
pub fn tempo_correct(pred: f64, truth: f64) -> Result<bool> {
    if truth.is_nan() || truth <= 0.0 || !truth.is_finite() {
        return Err(Error::invalid("tempo", format!("reference tempo {truth} must be positive")));
    }
    Ok(libm::fabs(pred - truth) <= TEMPO_TOLERANCE * truth * (1.0 + 1e-12))
}

pub fn tempo_acc1(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::invalid("predictions", "need equal, non-zero lengths"));
    }
    let mut hits = 0;
    for (&p, &t) in pred.iter().zip(truth) {
        hits += tempo_correct(p, t)? as usize;
    }
    Ok(hits as f64 / pred.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn hand_ap() {
        let ap = average_precision(&[0.9, 0.8, 0.1], &[true, false, true]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(average_precision(&[0.3, 0.2], &[false, false]), None);
        assert_eq!(average_precision(&[0.5, 0.1, 0.7], &[true, false, true]), Some(1.0));
    }

    #[test]
    fn ties_are_order_invariant() {
        let a = average_precision(&[0.5, 0.5, 0.1], &[true, false, true]).unwrap();
        let b = average_precision(&[0.5, 0.5, 0.1], &[false, true, true]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn map_skips_tags_without_positives() {
        let scores = vec![vec![0.9, 0.1], vec![0.2, 0.3]];
        let labels = vec![vec![true, false], vec![false, false]];
        assert_eq!(map_metric(&scores, &labels).unwrap(), 1.0);
    }

    #[test]
    fn key_cases() {
        let c_major = Key::new(0, Mode::Major).unwrap();
        let score = |t, m| key_score(Key::new(t, m).unwrap(), c_major);
        assert_eq!(score(0, Mode::Major), 1.0);
        assert_eq!(score(7, Mode::Major), 0.5);
        assert_eq!(score(9, Mode::Minor), 0.3);
        assert_eq!(score(0, Mode::Minor), 0.2);
        assert_eq!(score(5, Mode::Major), 0.0);
        let a_minor = Key::new(9, Mode::Minor).unwrap();
        assert_eq!(key_score(c_major, a_minor), 0.3);
        assert_eq!(key_score(Key::new(4, Mode::Minor).unwrap(), a_minor), 0.5);
        assert!(Key::new(12, Mode::Major).is_err());
        assert!(key_weighted_accuracy(&[Key { tonic: 13, mode: Mode::Minor }], &[c_major]).is_err());
    }

    #[test]
    fn tempo_boundary_is_inclusive() {
        assert!(tempo_correct(124.8, 120.0).unwrap());
        assert!(tempo_correct(115.2, 120.0).unwrap());
        assert!(!tempo_correct(125.0, 120.0).unwrap());
        assert!(tempo_correct(0.0, 0.0).is_err());
        assert_eq!(tempo_acc1(&[120.0, 125.0], &[120.0, 120.0]).unwrap(), 0.5);
    }
}

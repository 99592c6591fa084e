//! Agreement metrics for integer score predictions.
//!
//! Quadratic weighted kappa compares predicted and reference scores on a
//! shared integer range: 1 is perfect agreement, 0 is chance level given the
//! two marginals, negative values are systematic disagreement.

use crate::score_prior::ScoreRange;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no rating pairs")]
    Empty,
    #[error("rating {value} outside [{lo}, {hi}]")]
    OutOfRange { value: i64, lo: i64, hi: i64 },
    #[error("expected disagreement is zero, kappa is undefined")]
    ZeroExpectedDisagreement,
    #[error("distribution has {got} classes, range needs {want}")]
    LengthMismatch { got: usize, want: usize },
    #[error("distribution entries must be finite and nonnegative")]
    BadDistribution,
}

/// A predicted score next to the reference score it is judged against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingPair {
    pub predicted: i64,
    pub actual: i64,
}

impl RatingPair {
    pub fn new(predicted: i64, actual: i64) -> Self {
        RatingPair { predicted, actual }
    }
}

/// Streaming quadratic-weighted-kappa state.
///
/// Only integer class counts are accumulated, so pair order never affects
/// the result and [`finalize`](QwkAccumulator::finalize) equals the batch
/// computation exactly.
#[derive(Debug, Clone)]
pub struct QwkAccumulator {
    range: ScoreRange,
    /// Row-major C x C confusion counts, predicted indexing rows.
    counts: Vec<u64>,
    n: u64,
}

impl QwkAccumulator {
    pub fn new(range: ScoreRange) -> Self {
        let c = range.class_count();
        QwkAccumulator {
            range,
            counts: vec![0; c * c],
            n: 0,
        }
    }

    pub fn push(&mut self, predicted: i64, actual: i64) -> Result<(), MetricsError> {
        let i = self.index_of(predicted)?;
        let j = self.index_of(actual)?;
        let c = self.range.class_count();
        self.counts[i * c + j] += 1;
        self.n += 1;
        Ok(())
    }

    pub fn extend<'a>(
        &mut self,
        pairs: impl IntoIterator<Item = &'a RatingPair>,
    ) -> Result<(), MetricsError> {
        for p in pairs {
            self.push(p.predicted, p.actual)?;
        }
        Ok(())
    }

    pub fn n_pairs(&self) -> u64 {
        self.n
    }

    fn index_of(&self, value: i64) -> Result<usize, MetricsError> {
        if value < self.range.min() || value > self.range.max() {
            return Err(MetricsError::OutOfRange {
                value,
                lo: self.range.min(),
                hi: self.range.max(),
            });
        }
        Ok((value - self.range.min()) as usize)
    }

    /// kappa = 1 - sum(w * O) / sum(w * E), with w_ij = (i - j)^2 / (C - 1)^2,
    /// O the confusion counts, and E the outer product of the two marginals
    /// scaled to the pair count.
    pub fn finalize(&self) -> Result<f64, MetricsError> {
        if self.n == 0 {
            return Err(MetricsError::Empty);
        }
        let c = self.range.class_count();
        let norm = ((c - 1) * (c - 1)) as f64;
        let mut row = vec![0u64; c];
        let mut col = vec![0u64; c];
        for i in 0..c {
            for j in 0..c {
                let o = self.counts[i * c + j];
                row[i] += o;
                col[j] += o;
            }
        }
        let n = self.n as f64;
        let mut observed = 0.0;
        let mut expected = 0.0;
        for i in 0..c {
            for j in 0..c {
                let w = ((i as f64 - j as f64) * (i as f64 - j as f64)) / norm;
                observed += w * self.counts[i * c + j] as f64;
                expected += w * (row[i] as f64 * col[j] as f64) / n;
            }
        }
        if expected == 0.0 {
            return Err(MetricsError::ZeroExpectedDisagreement);
        }
        Ok(1.0 - observed / expected)
    }
}

/// Batch quadratic weighted kappa; delegates to the streaming accumulator.
pub fn qwk(pairs: &[RatingPair], range: ScoreRange) -> Result<f64, MetricsError> {
    let mut acc = QwkAccumulator::new(range);
    acc.extend(pairs)?;
    acc.finalize()
}

/// Maps a class distribution to the integer score of its most probable
/// class. Exact probability ties resolve to the lower score.
pub fn score_from_distribution(probs: &[f64], range: ScoreRange) -> Result<i64, MetricsError> {
    if probs.len() != range.class_count() {
        return Err(MetricsError::LengthMismatch {
            got: probs.len(),
            want: range.class_count(),
        });
    }
    if !probs.iter().all(|p| p.is_finite() && *p >= 0.0) {
        return Err(MetricsError::BadDistribution);
    }
    let mut best = 0usize;
    for (idx, p) in probs.iter().enumerate() {
        if *p > probs[best] {
            best = idx;
        }
    }
    Ok(range.min() + best as i64)
}

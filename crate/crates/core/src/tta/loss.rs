//! The two adaptation objectives and their gradients with respect to the
//! decoded slot scores.

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detection::{argmax_lowest, MultiClassScoreBatch, ScoreBatch};
use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::{clamp_prob, PROB_EPS};

/// Sentinel stored for slots without a sampled negative class.
pub const NO_NEGATIVE: i64 = -1;

#[derive(Debug, Clone, PartialEq)]
pub struct AoLoss {
    pub value: f64,
    /// `d value / d score`, shaped like `ScoreBatch::scores`.
    pub d_scores: Array2<f64>,
    pub n_high: usize,
}

/// `(1/B) * sum(-ln s)` over valid slots with `s >= alpha`; zero when no
/// slot qualifies.
pub fn adaptive_optimization_loss(scores: &ScoreBatch, alpha: f64) -> AoLoss {
    let b = scores.batch() as f64;
    let mut d_scores = Array2::zeros(scores.scores.raw_dim());
    let mut value = 0.0;
    let mut n_high = 0;
    for ((idx, &s), &valid) in scores.scores.indexed_iter().zip(scores.valid.iter()) {
        if !valid || s < alpha {
            continue;
        }
        n_high += 1;
        let c = clamp_prob(s);
        value -= c.ln();
        if c == s {
            d_scores[idx] = -1.0 / (b * s);
        }
    }
    AoLoss { value: value / b, d_scores, n_high }
}

/// Draws one negative class per valid slot, uniformly among the classes
/// other than the slot's argmax class. Invalid slots get [`NO_NEGATIVE`].
pub fn sample_negative_classes(multi: &MultiClassScoreBatch, rng_seed: u64) -> Result<Array2<i64>> {
    let (b, n, k) = multi.class_scores.dim();
    if k < 2 {
        return Err(Error::invalid("negative class sampling needs at least two classes"));
    }
    let mut rng = rng_from(rng_seed);
    let mut out = Array2::from_elem((b, n), NO_NEGATIVE);
    for i in 0..b {
        for j in 0..n {
            if !multi.valid[[i, j]] {
                continue;
            }
            let (positive, _) = argmax_lowest((0..k).map(|kk| multi.class_scores[[i, j, kk]]));
            let u = rng.gen_range(0..k - 1);
            let neg = if u >= positive { u + 1 } else { u };
            out[[i, j]] = neg as i64;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NregLoss {
    pub value: f64,
    /// `d value / d class score`, shaped like `class_scores`.
    pub d_class_scores: Array3<f64>,
    pub n_low: usize,
    pub per_class_counts: Vec<usize>,
}

/// Class-balanced negative-learning loss over the low-score window
/// `[eta, alpha)`.
///
/// Each slot in the window contributes `-ybar * ln(1 - p)` to the error of
/// its sampled negative class, where `p` is that class's score and
/// `ybar = 1 - p` is a constant weight (no gradient flows through it).
/// Per-class errors are divided by the number of slots sampled into that
/// class; classes with no slots contribute nothing.
pub fn negative_regularization_loss(
    multi: &MultiClassScoreBatch,
    scores: &ScoreBatch,
    neg_classes: &Array2<i64>,
    eta: f64,
    alpha: f64,
) -> NregLoss {
    let (b, n, k) = multi.class_scores.dim();
    let mut errors = vec![0.0; k];
    let mut counts = vec![0usize; k];
    // per-slot derivative before class balancing
    let mut raw_grad: Vec<(usize, usize, usize, f64)> = Vec::new();
    for i in 0..b {
        for j in 0..n {
            if !scores.valid[[i, j]] {
                continue;
            }
            let s = scores.scores[[i, j]];
            if !(s >= eta && s < alpha) {
                continue;
            }
            let neg = neg_classes[[i, j]];
            if neg < 0 {
                continue;
            }
            let neg = neg as usize;
            let p = multi.class_scores[[i, j, neg]];
            let ybar = 1.0 - p;
            let q = 1.0 - p;
            let qc = q.clamp(PROB_EPS, 1.0 - PROB_EPS);
            errors[neg] -= ybar * qc.ln();
            counts[neg] += 1;
            // d/dp [-ybar ln(1 - p)] = ybar / (1 - p)
            let g = if qc == q { ybar / q } else { 0.0 };
            raw_grad.push((i, j, neg, g));
        }
    }
    let value = errors.iter().zip(&counts).filter(|(_, &c)| c > 0).map(|(e, &c)| e / c as f64).sum();
    let mut d_class_scores = Array3::zeros((b, n, k));
    for (i, j, neg, g) in raw_grad.iter().copied() {
        d_class_scores[[i, j, neg]] += g / counts[neg] as f64;
    }
    NregLoss { value, d_class_scores, n_low: raw_grad.len(), per_class_counts: counts }
}

pub fn combined_loss(l_ao: f64, l_nreg: f64, lambda_balance: f64) -> f64 {
    l_ao + lambda_balance * l_nreg
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ao: f64,
    pub l_nreg: f64,
    pub total: f64,
    pub n_high: usize,
    pub n_low: usize,
    pub per_class_counts: Vec<usize>,
}

impl LossBreakdown {
    pub fn zero(classes: usize) -> Self {
        Self { l_ao: 0.0, l_nreg: 0.0, total: 0.0, n_high: 0, n_low: 0, per_class_counts: vec![0; classes] }
    }
}

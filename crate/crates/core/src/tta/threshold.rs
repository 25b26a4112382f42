//! Adaptive score threshold tracked as an exponential moving average of the
//! batch mean score.

use serde::{Deserialize, Serialize};

use crate::detection::ScoreBatch;

/// Mean over images of the per-image mean of scores `>= gamma`.
///
/// Images without any eligible score are left out of the outer mean;
/// `None` means no image in the batch had one.
pub fn compute_batch_mean_score(scores: &ScoreBatch, gamma: f64) -> Option<f64> {
    let mut sum_of_means = 0.0;
    let mut images = 0usize;
    for i in 0..scores.batch() {
        let (sum, count) =
            scores.image_scores(i).filter(|&s| s >= gamma).fold((0.0, 0usize), |(s0, c0), s| (s0 + s, c0 + 1));
        if count > 0 {
            sum_of_means += sum / count as f64;
            images += 1;
        }
    }
    (images > 0).then(|| sum_of_means / images as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdState {
    pub alpha: f64,
    pub gamma: f64,
    pub beta: f64,
    pub step: u64,
}

impl ThresholdState {
    pub fn new(gamma: f64, beta: f64) -> Self {
        Self { alpha: gamma, gamma, beta, step: 0 }
    }

    /// Advances the tracker by one batch. The first update pins `alpha` to
    /// `gamma`; later updates blend in the batch mean score. A batch without
    /// eligible scores leaves `alpha` where it was but still counts as a step.
    pub fn update(&self, scores: &ScoreBatch) -> Self {
        let mut next = *self;
        next.step += 1;
        if next.step == 1 {
            next.alpha = self.gamma;
        } else if let Some(mean) = compute_batch_mean_score(scores, self.gamma) {
            next.alpha = self.beta * mean + (1.0 - self.beta) * self.alpha;
        }
        next
    }

    /// Same recurrence, driven by an already computed batch mean.
    pub fn update_with_mean(&self, mean: Option<f64>) -> Self {
        let mut next = *self;
        next.step += 1;
        if next.step == 1 {
            next.alpha = self.gamma;
        } else if let Some(m) = mean {
            next.alpha = self.beta * m + (1.0 - self.beta) * self.alpha;
        }
        next
    }
}

pub fn update_threshold(state: &ThresholdState, scores: &ScoreBatch) -> ThresholdState {
    state.update(scores)
}

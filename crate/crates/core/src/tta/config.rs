use serde::{Deserialize, Serialize};

use crate::detector::DEFAULT_N_MAX;
use crate::error::{Error, Result};

/// Hyperparameters of the adaptation loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TtaConfig {
    pub lambda_balance: f64,
    pub beta: f64,
    /// Low-score floor of the negative-learning window.
    pub eta: f64,
    /// Detection threshold; also the first threshold value.
    pub gamma: f64,
    pub n_max: usize,
    pub batch_size: usize,
    /// Step size at `reference_batch_size`; see [`TtaConfig::effective_learning_rate`].
    pub learning_rate: f64,
    /// Batch size at which `learning_rate` applies unscaled.
    pub reference_batch_size: usize,
    /// Scale the rate linearly with `batch_size / reference_batch_size`.
    pub scale_lr_with_batch: bool,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TtaConfig {
    fn default() -> Self {
        Self {
            lambda_balance: 1.0,
            beta: 0.1,
            eta: 0.05,
            gamma: 0.2,
            n_max: DEFAULT_N_MAX,
            batch_size: 16,
            learning_rate: 0.5 * crate::detector::TrainConfig::default().base_lr,
            reference_batch_size: 16,
            scale_lr_with_batch: true,
            momentum: 0.9,
            seed: 0,
        }
    }
}

impl TtaConfig {
    /// Defaults with the learning rate set to half of `base_lr`.
    pub fn for_base_lr(base_lr: f64) -> Self {
        Self { learning_rate: 0.5 * base_lr, ..Self::default() }
    }

    /// Rate handed to the optimizer: `learning_rate * batch_size / reference`
    /// when scaling is on.
    pub fn effective_learning_rate(&self) -> f64 {
        if self.scale_lr_with_batch {
            self.learning_rate * self.batch_size as f64 / self.reference_batch_size as f64
        } else {
            self.learning_rate
        }
    }

    // Negated comparisons so that NaN fields are rejected too.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lambda_balance >= 0.0) {
            return fail(format!("lambda_balance must be >= 0, got {}", self.lambda_balance));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return fail(format!("beta must be in [0, 1], got {}", self.beta));
        }
        if !(self.eta > 0.0 && self.eta < self.gamma && self.gamma < 1.0) {
            return fail(format!("need 0 < eta < gamma < 1, got eta {} gamma {}", self.eta, self.gamma));
        }
        if self.n_max == 0 || self.batch_size == 0 || self.reference_batch_size == 0 {
            return fail("n_max, batch_size and reference_batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0) {
            return fail(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        Ok(())
    }
}

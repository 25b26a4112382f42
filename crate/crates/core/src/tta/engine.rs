use std::io::Write;

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

use super::config::TtaConfig;
use super::loss::{
    adaptive_optimization_loss, combined_loss, negative_regularization_loss, sample_negative_classes, LossBreakdown,
};
use super::params::{select_adaptable_parameters, AdaptableParameterSet};
use super::threshold::{compute_batch_mean_score, ThresholdState};
use crate::detection::{scatter_to_heatmap, Detection, MultiClassScoreBatch, ScoreBatch};
use crate::detector::{infer_batch, BatchInference, GradScope, NormMode, ToyDetector};
use crate::error::{Error, Result};
use crate::optim::SgdMomentum;
use crate::rng::derive_seed;

/// One batch of a test stream: `B x 3 x S x S` pixels and the stream index
/// of its first image.
#[derive(Debug, Clone)]
pub struct ImageBatch {
    pub first_index: usize,
    pub images: Array4<f64>,
}

/// Per-batch metrics line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub policy: String,
    pub step: u64,
    pub alpha: f64,
    pub l_ao: f64,
    pub l_nreg: f64,
    pub total: f64,
    pub n_high: usize,
    pub n_low: usize,
    pub per_class_counts: Vec<usize>,
    /// Mean score of the reported detections (slots `>= eta`).
    pub mean_score: Option<f64>,
    pub n_images: usize,
    pub n_detections: usize,
    pub n_above_gamma: usize,
    /// Mean score of the sampled negative class over slots `>= eta`.
    pub neg_score_mean: Option<f64>,
    pub stepped: bool,
}

#[derive(Debug, Clone)]
pub struct StepReport {
    pub detections: Vec<Detection>,
    pub record: StepRecord,
}

/// A per-batch test-time policy. Implementations may mutate the model but
/// must report detections computed before any parameter update.
pub trait AdaptationPolicy {
    fn name(&self) -> &'static str;

    fn process(&mut self, model: &mut ToyDetector, batch: &ImageBatch) -> Result<StepReport>;
}

/// Slot statistics shared by every policy's metrics line.
pub(crate) struct SlotStats {
    pub mean_score: Option<f64>,
    pub n_detections: usize,
    pub n_above_gamma: usize,
    pub neg_score_mean: Option<f64>,
}

pub(crate) fn slot_stats(
    scores: &ScoreBatch,
    multi: &MultiClassScoreBatch,
    negatives: Option<&Array2<i64>>,
    eta: f64,
    gamma: f64,
) -> SlotStats {
    let mut sum = 0.0;
    let mut n = 0usize;
    let mut above = 0usize;
    let mut neg_sum = 0.0;
    let mut neg_n = 0usize;
    for ((idx, &s), &valid) in scores.scores.indexed_iter().zip(scores.valid.iter()) {
        if !valid || s < eta {
            continue;
        }
        sum += s;
        n += 1;
        above += (s >= gamma) as usize;
        if let Some(neg) = negatives {
            let k = neg[idx];
            if k >= 0 {
                neg_sum += multi.class_scores[[idx.0, idx.1, k as usize]];
                neg_n += 1;
            }
        }
    }
    SlotStats {
        mean_score: (n > 0).then(|| sum / n as f64),
        n_detections: n,
        n_above_gamma: above,
        neg_score_mean: (neg_n > 0).then(|| neg_sum / neg_n as f64),
    }
}

/// The reliability-driven adapter with its negative-learning regularizer.
///
/// Owns the threshold tracker, the adaptable subset and the momentum buffer
/// so consecutive calls to [`MonoTta::adapt_step`] form one stream.
#[derive(Debug, Clone)]
pub struct MonoTta {
    config: TtaConfig,
    params: AdaptableParameterSet,
    optimizer: SgdMomentum,
    state: ThresholdState,
}

/// Loss terms of one batch together with the heatmap gradient of the total.
pub struct ObjectiveEval {
    pub breakdown: LossBreakdown,
    pub negatives: Array2<i64>,
    pub d_heatmap: Array4<f64>,
}

impl MonoTta {
    pub fn new(model: &ToyDetector, config: TtaConfig) -> Result<Self> {
        config.validate()?;
        let params = select_adaptable_parameters(model)?;
        let optimizer = SgdMomentum::new(config.effective_learning_rate(), config.momentum, params.count(model));
        Ok(Self { state: ThresholdState::new(config.gamma, config.beta), config, params, optimizer })
    }

    pub fn config(&self) -> &TtaConfig {
        &self.config
    }

    pub fn state(&self) -> &ThresholdState {
        &self.state
    }

    pub fn params(&self) -> &AdaptableParameterSet {
        &self.params
    }

    /// Seed of the negative-class draw at a given step.
    pub fn negative_seed(&self, step: u64) -> u64 {
        derive_seed(self.config.seed, &[0x4e47, step])
    }

    /// Evaluates both losses for decoded slots at threshold `alpha`.
    pub fn objective(
        config: &TtaConfig,
        inference: &BatchInference,
        alpha: f64,
        negative_seed: u64,
    ) -> Result<ObjectiveEval> {
        let scores = &inference.scores;
        let multi = &inference.multi;
        let ao = adaptive_optimization_loss(scores, alpha);
        let negatives = sample_negative_classes(multi, negative_seed)?;
        let nreg = negative_regularization_loss(multi, scores, &negatives, config.eta, alpha);
        let total = combined_loss(ao.value, nreg.value, config.lambda_balance);
        let d_class = nreg.d_class_scores * config.lambda_balance;
        let d_heatmap =
            scatter_to_heatmap(scores, Some(&ao.d_scores), Some(&d_class), inference.output.heatmap.values().dim());
        Ok(ObjectiveEval {
            breakdown: LossBreakdown {
                l_ao: ao.value,
                l_nreg: nreg.value,
                total,
                n_high: ao.n_high,
                n_low: nreg.n_low,
                per_class_counts: nreg.per_class_counts,
            },
            negatives,
            d_heatmap,
        })
    }

    /// One online step: forward with batch statistics, threshold update,
    /// loss evaluation, and one momentum-SGD update of the normalization
    /// affine parameters. Detections come from the pre-update forward pass.
    pub fn adapt_step(&mut self, model: &mut ToyDetector, batch: &ImageBatch) -> Result<StepReport> {
        let (b, ..) = batch.images.dim();
        if b > self.config.batch_size {
            return Err(Error::invalid(format!(
                "batch of {b} images exceeds configured batch size {}",
                self.config.batch_size
            )));
        }
        let cfg = &self.config;
        let inference =
            infer_batch(model, batch.images.view(), NormMode::Batch, cfg.n_max, cfg.eta, batch.first_index)?;
        let mean = compute_batch_mean_score(&inference.scores, cfg.gamma);
        self.state = self.state.update_with_mean(mean);
        let alpha = self.state.alpha;
        let seed = self.negative_seed(self.state.step);
        let eval = Self::objective(cfg, &inference, alpha, seed)?;
        let active = eval.breakdown.n_high > 0 || (cfg.lambda_balance > 0.0 && eval.breakdown.n_low > 0);
        if active {
            let grads = model.backward(&inference.cache, eval.d_heatmap.view(), None, GradScope::NormAffine);
            let g = self.params.gradient(&grads);
            let mut values = self.params.values(model);
            self.optimizer.step(&mut values, &g);
            self.params.assign(model, &values);
        }
        let stats = slot_stats(&inference.scores, &inference.multi, Some(&eval.negatives), cfg.eta, cfg.gamma);
        let bd = eval.breakdown;
        Ok(StepReport {
            detections: inference.detections,
            record: StepRecord {
                policy: self.name().into(),
                step: self.state.step,
                alpha,
                l_ao: bd.l_ao,
                l_nreg: bd.l_nreg,
                total: bd.total,
                n_high: bd.n_high,
                n_low: bd.n_low,
                per_class_counts: bd.per_class_counts,
                mean_score: stats.mean_score,
                n_images: b,
                n_detections: stats.n_detections,
                n_above_gamma: stats.n_above_gamma,
                neg_score_mean: stats.neg_score_mean,
                stepped: active,
            },
        })
    }
}

impl AdaptationPolicy for MonoTta {
    fn name(&self) -> &'static str {
        "monotta"
    }

    fn process(&mut self, model: &mut ToyDetector, batch: &ImageBatch) -> Result<StepReport> {
        self.adapt_step(model, batch)
    }
}

#[derive(Debug, Clone, Default)]
pub struct AdaptationRun {
    pub detections: Vec<Detection>,
    pub records: Vec<StepRecord>,
}

impl AdaptationRun {
    pub fn alpha_trajectory(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.alpha).collect()
    }

    /// Writes one JSON object per batch.
    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n").map_err(|e| Error::io("<metrics log>", e))?;
        }
        Ok(())
    }
}

/// Visits every batch of `stream` once, in order, with `policy`.
pub fn run_adaptation<P, I>(model: &mut ToyDetector, stream: I, policy: &mut P) -> Result<AdaptationRun>
where
    P: AdaptationPolicy + ?Sized,
    I: IntoIterator<Item = Result<ImageBatch>>,
{
    let mut run = AdaptationRun::default();
    for batch in stream {
        let report = policy.process(model, &batch?)?;
        run.detections.extend(report.detections);
        run.records.push(report.record);
    }
    Ok(run)
}

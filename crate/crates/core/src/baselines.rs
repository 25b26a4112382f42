//! Reference test-time policies: the frozen source model, normalization
//! statistics re-estimation, and entropy minimization over decoded slots.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::clamp_prob;
use crate::detection::{scatter_to_heatmap, ScoreBatch};
use crate::detector::{infer_batch, GradScope, NormMode, ToyDetector};
use crate::error::{Error, Result};
use crate::optim::SgdMomentum;
use crate::rng::derive_seed;
use crate::tta::engine::slot_stats;
use crate::tta::loss::sample_negative_classes;
use crate::tta::{
    select_adaptable_parameters, AdaptableParameterSet, AdaptationPolicy, ImageBatch, MonoTta, StepRecord, StepReport,
    TtaConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum PolicyKind {
    SourceOnly,
    BnAdapt,
    EntropyMin,
    Monotta,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 4] =
        [PolicyKind::SourceOnly, PolicyKind::BnAdapt, PolicyKind::EntropyMin, PolicyKind::Monotta];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::SourceOnly => "source_only",
            PolicyKind::BnAdapt => "bn_adapt",
            PolicyKind::EntropyMin => "entropy_min",
            PolicyKind::Monotta => "monotta",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            if s == "eata" {
                Error::Config("eata is not implemented".into())
            } else {
                Error::Config(format!("unknown policy {s:?}"))
            }
        })
    }

    /// Builds a fresh policy for one stream.
    pub fn build(self, model: &ToyDetector, config: &TtaConfig) -> Result<Box<dyn AdaptationPolicy>> {
        config.validate()?;
        Ok(match self {
            PolicyKind::SourceOnly => Box::new(SourceOnly::new(config.clone())),
            PolicyKind::BnAdapt => Box::new(BnAdapt::new(config.clone())),
            PolicyKind::EntropyMin => Box::new(EntropyMin::new(model, config.clone())?),
            PolicyKind::Monotta => Box::new(MonoTta::new(model, config.clone())?),
        })
    }
}

impl TryFrom<String> for PolicyKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        Self::parse(&s)
    }
}

impl From<PolicyKind> for String {
    fn from(k: PolicyKind) -> String {
        k.name().to_string()
    }
}

impl std::fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn passive_record(
    policy: &str,
    step: u64,
    config: &TtaConfig,
    scores: &ScoreBatch,
    multi: &crate::detection::MultiClassScoreBatch,
    n_images: usize,
) -> Result<StepRecord> {
    let negatives = if multi.classes() >= 2 {
        Some(sample_negative_classes(multi, derive_seed(config.seed, &[0x4e47, step]))?)
    } else {
        None
    };
    let stats = slot_stats(scores, multi, negatives.as_ref(), config.eta, config.gamma);
    Ok(StepRecord {
        policy: policy.into(),
        step,
        alpha: config.gamma,
        l_ao: 0.0,
        l_nreg: 0.0,
        total: 0.0,
        n_high: 0,
        n_low: 0,
        per_class_counts: vec![0; multi.classes()],
        mean_score: stats.mean_score,
        n_images,
        n_detections: stats.n_detections,
        n_above_gamma: stats.n_above_gamma,
        neg_score_mean: stats.neg_score_mean,
        stepped: false,
    })
}

/// Frozen pre-trained model with stored normalization statistics.
#[derive(Debug, Clone)]
pub struct SourceOnly {
    config: TtaConfig,
    step: u64,
}

impl SourceOnly {
    pub fn new(config: TtaConfig) -> Self {
        Self { config, step: 0 }
    }
}

impl AdaptationPolicy for SourceOnly {
    fn name(&self) -> &'static str {
        "source_only"
    }

    fn process(&mut self, model: &mut ToyDetector, batch: &ImageBatch) -> Result<StepReport> {
        self.step += 1;
        let inf = infer_batch(
            model,
            batch.images.view(),
            NormMode::Running,
            self.config.n_max,
            self.config.eta,
            batch.first_index,
        )?;
        let record =
            passive_record(self.name(), self.step, &self.config, &inf.scores, &inf.multi, batch.images.dim().0)?;
        Ok(StepReport { detections: inf.detections, record })
    }
}

/// Normalization statistics from the current batch, no parameter update.
#[derive(Debug, Clone)]
pub struct BnAdapt {
    config: TtaConfig,
    step: u64,
}

impl BnAdapt {
    pub fn new(config: TtaConfig) -> Self {
        Self { config, step: 0 }
    }
}

pub fn bn_adapt_step(
    model: &ToyDetector,
    batch: &ImageBatch,
    config: &TtaConfig,
) -> Result<crate::detector::BatchInference> {
    infer_batch(model, batch.images.view(), NormMode::Batch, config.n_max, config.eta, batch.first_index)
}

impl AdaptationPolicy for BnAdapt {
    fn name(&self) -> &'static str {
        "bn_adapt"
    }

    fn process(&mut self, model: &mut ToyDetector, batch: &ImageBatch) -> Result<StepReport> {
        self.step += 1;
        let inf = bn_adapt_step(model, batch, &self.config)?;
        let record =
            passive_record(self.name(), self.step, &self.config, &inf.scores, &inf.multi, batch.images.dim().0)?;
        Ok(StepReport { detections: inf.detections, record })
    }
}

/// Binary entropy `-s ln s - (1-s) ln(1-s)`.
pub fn bernoulli_entropy(s: f64) -> f64 {
    let s = clamp_prob(s);
    -s * s.ln() - (1.0 - s) * (1.0 - s).ln()
}

/// `d entropy / d s = ln((1 - s) / s)`.
pub fn bernoulli_entropy_grad(s: f64) -> f64 {
    let s = clamp_prob(s);
    ((1.0 - s) / s).ln()
}

/// Mean slot entropy over valid slots with `s >= eta`, and its gradient
/// w.r.t. slot scores. `None` when no slot qualifies.
pub fn slot_entropy_loss(scores: &ScoreBatch, eta: f64) -> Option<(f64, Array2<f64>, usize)> {
    let eligible: Vec<(usize, usize)> =
        scores.scores.indexed_iter().filter(|(idx, &s)| scores.valid[*idx] && s >= eta).map(|(idx, _)| idx).collect();
    if eligible.is_empty() {
        return None;
    }
    let n = eligible.len() as f64;
    let mut grad = Array2::zeros(scores.scores.raw_dim());
    let mut value = 0.0;
    for &idx in &eligible {
        let s = scores.scores[idx];
        value += bernoulli_entropy(s);
        grad[idx] = bernoulli_entropy_grad(s) / n;
    }
    Some((value / n, grad, eligible.len()))
}

/// Entropy minimization over decoded top scores, stepping the same
/// normalization affine subset as the main adapter.
#[derive(Debug, Clone)]
pub struct EntropyMin {
    config: TtaConfig,
    params: AdaptableParameterSet,
    optimizer: SgdMomentum,
    step: u64,
}

impl EntropyMin {
    pub fn new(model: &ToyDetector, config: TtaConfig) -> Result<Self> {
        let params = select_adaptable_parameters(model)?;
        let optimizer = SgdMomentum::new(config.effective_learning_rate(), config.momentum, params.count(model));
        Ok(Self { config, params, optimizer, step: 0 })
    }

    pub fn params(&self) -> &AdaptableParameterSet {
        &self.params
    }
}

pub fn entropy_min_step(policy: &mut EntropyMin, model: &mut ToyDetector, batch: &ImageBatch) -> Result<StepReport> {
    policy.step += 1;
    let cfg = &policy.config;
    let inf = infer_batch(model, batch.images.view(), NormMode::Batch, cfg.n_max, cfg.eta, batch.first_index)?;
    let mut record = passive_record("entropy_min", policy.step, cfg, &inf.scores, &inf.multi, batch.images.dim().0)?;
    if let Some((value, d_scores, _)) = slot_entropy_loss(&inf.scores, cfg.eta) {
        let d_heat = scatter_to_heatmap(&inf.scores, Some(&d_scores), None, inf.output.heatmap.values().dim());
        let grads = model.backward(&inf.cache, d_heat.view(), None, GradScope::NormAffine);
        let g = policy.params.gradient(&grads);
        let mut values = policy.params.values(model);
        policy.optimizer.step(&mut values, &g);
        policy.params.assign(model, &values);
        record.total = value;
        record.stepped = true;
    }
    Ok(StepReport { detections: inf.detections, record })
}

impl AdaptationPolicy for EntropyMin {
    fn name(&self) -> &'static str {
        "entropy_min"
    }

    fn process(&mut self, model: &mut ToyDetector, batch: &ImageBatch) -> Result<StepReport> {
        entropy_min_step(self, model, batch)
    }
}

//! Test-time adaptation: adaptive threshold, reliable-object and
//! negative-learning losses, and the streaming adaptation loop.

pub mod config;
pub mod engine;
pub mod loss;
pub mod params;
pub mod threshold;

pub use config::TtaConfig;
pub use engine::{run_adaptation, AdaptationPolicy, AdaptationRun, ImageBatch, MonoTta, StepRecord, StepReport};
pub use loss::{
    adaptive_optimization_loss, combined_loss, negative_regularization_loss, sample_negative_classes, LossBreakdown,
};
pub use params::{select_adaptable_parameters, AdaptableParameterSet};
pub use threshold::{compute_batch_mean_score, update_threshold, ThresholdState};

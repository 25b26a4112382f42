//! Test-time adaptation of center-point detectors.
//!
//! The crate bundles the adaptation engine (adaptive score threshold,
//! reliable-object loss and negative-learning regularizer applied to the
//! affine parameters of normalization layers) with the pieces needed to
//! exercise it end to end on a desk-scale benchmark: a small differentiable
//! detector with a synthetic scene generator, a procedural corruption
//! pipeline, reference baselines, AP evaluation and an experiment harness.

pub mod baselines;
pub mod corruption;
pub mod detection;
pub mod detector;
pub mod error;
pub mod eval;
pub mod harness;
pub mod imageio;
pub mod optim;
pub mod rng;
pub mod tta;

pub use error::{Error, Result};

/// Clamp applied to every probability before it enters a logarithm.
pub const PROB_EPS: f64 = 1e-7;

#[inline]
pub(crate) fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

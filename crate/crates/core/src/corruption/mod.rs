//! Procedural image corruptions: 13 kinds at 5 severities each.
//!
//! Images are `H x W x 3` arrays in `[0, 1]`. Every recipe is a pure
//! function of the pixels and the [`CorruptionSpec`] (its seed drives all
//! random draws), and outputs are clipped back into `[0, 1]`.

mod color;
mod filters;
mod recipes;
pub mod stream;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array3, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from;

pub use stream::{
    build_stream, corrupt_all, in_memory_batches, materialize, per_image_seed, CorruptedStream, Manifest, ManifestRow,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    DefocusBlur,
    GlassBlur,
    MotionBlur,
    Snow,
    Frost,
    Fog,
    Brightness,
    Contrast,
    Pixelate,
    Saturate,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 13] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ShotNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::DefocusBlur,
        CorruptionKind::GlassBlur,
        CorruptionKind::MotionBlur,
        CorruptionKind::Snow,
        CorruptionKind::Frost,
        CorruptionKind::Fog,
        CorruptionKind::Brightness,
        CorruptionKind::Contrast,
        CorruptionKind::Pixelate,
        CorruptionKind::Saturate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ShotNoise => "shot_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::DefocusBlur => "defocus_blur",
            CorruptionKind::GlassBlur => "glass_blur",
            CorruptionKind::MotionBlur => "motion_blur",
            CorruptionKind::Snow => "snow",
            CorruptionKind::Frost => "frost",
            CorruptionKind::Fog => "fog",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Pixelate => "pixelate",
            CorruptionKind::Saturate => "saturate",
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown corruption kind {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8, seed: u64) -> Result<Self> {
        let spec = Self { kind, severity, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.severity) {
            return Err(Error::invalid(format!("severity {} outside 1..=5", self.severity)));
        }
        Ok(())
    }

    /// Same kind and severity with a different seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..*self }
    }
}

/// Applies one corruption to an `H x W x 3` image with values in `[0, 1]`.
pub fn apply_corruption(image: ArrayView3<'_, f64>, spec: &CorruptionSpec) -> Result<Array3<f64>> {
    spec.validate()?;
    let (h, w, c) = image.dim();
    if c != 3 || h == 0 || w == 0 {
        return Err(Error::Shape { expected: "HxWx3 with H, W >= 1".into(), actual: format!("{h}x{w}x{c}") });
    }
    if let Some(v) = image.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
        return Err(Error::invalid(format!("pixel value {v} is not a finite value in [0, 1]")));
    }
    let mut rng = rng_from(spec.seed);
    let s = spec.severity as usize - 1;
    let img = image.to_owned();
    let mut out = match spec.kind {
        CorruptionKind::GaussianNoise => recipes::gaussian_noise(img, recipes::GAUSSIAN_SIGMA[s], &mut rng),
        CorruptionKind::ShotNoise => recipes::shot_noise(img, recipes::SHOT_RATE[s], &mut rng),
        CorruptionKind::ImpulseNoise => recipes::impulse_noise(img, recipes::IMPULSE_AMOUNT[s], &mut rng),
        CorruptionKind::DefocusBlur => recipes::defocus_blur(&img, recipes::DEFOCUS_RADIUS[s]),
        CorruptionKind::GlassBlur => recipes::glass_blur(&img, recipes::GLASS[s], &mut rng),
        CorruptionKind::MotionBlur => recipes::motion_blur(&img, recipes::MOTION_LENGTH[s], &mut rng),
        CorruptionKind::Snow => recipes::snow(img, recipes::SNOW[s], &mut rng),
        CorruptionKind::Frost => recipes::frost(img, recipes::FROST[s], &mut rng),
        CorruptionKind::Fog => recipes::fog(img, recipes::FOG[s], &mut rng),
        CorruptionKind::Brightness => color::brightness(img, color::BRIGHTNESS_GAIN[s]),
        CorruptionKind::Contrast => recipes::contrast(img, recipes::CONTRAST[s]),
        CorruptionKind::Pixelate => recipes::pixelate(&img, recipes::PIXELATE[s]),
        CorruptionKind::Saturate => color::saturate(img, color::SATURATION_GAIN[s]),
    };
    out.mapv_inplace(|v| if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 });
    Ok(out)
}

/// Peak signal-to-noise ratio in dB for signals in `[0, 1]`; infinite for
/// identical images.
pub fn psnr(a: ArrayView3<'_, f64>, b: ArrayView3<'_, f64>) -> f64 {
    let n = a.len() as f64;
    let mse = a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

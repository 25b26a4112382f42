//! Toy center-point detector: architecture, training, persistence and the
//! synthetic scenes it is trained on.

pub mod checkpoint;
pub mod layers;
pub mod model;
pub mod scenes;
pub mod train;

use ndarray::{ArrayView3, ArrayView4};

pub use checkpoint::{load_checkpoint, load_checkpoint_with, save_checkpoint, DetectorCheckpoint};
pub use model::{
    ArchDescriptor, BlockSpec, DetectorOutput, ForwardCache, GradScope, Gradients, NormMode, ParamRef, ToyDetector,
};
pub use scenes::{generate_scenes, quantize, to_batch, Scene, SceneSet};
pub use train::{train_detector, TrainConfig, TrainingRecord};

use crate::detection::{decode_detections, extract_peaks, Detection, MultiClassScoreBatch, ScoreBatch};
use crate::error::Result;

/// Maximum decoded objects per image on the toy benchmark.
pub const DEFAULT_N_MAX: usize = 20;

/// Everything a single forward pass over one batch yields.
pub struct BatchInference {
    pub output: DetectorOutput,
    pub cache: ForwardCache,
    pub scores: ScoreBatch,
    pub multi: MultiClassScoreBatch,
    pub detections: Vec<Detection>,
}

/// Forward pass plus peak decoding for one `B x 3 x S x S` batch.
/// Detections below `score_floor` are dropped; image indices start at
/// `first_image_index`.
pub fn infer_batch(
    model: &ToyDetector,
    images: ArrayView4<'_, f64>,
    mode: NormMode,
    n_max: usize,
    score_floor: f64,
    first_image_index: usize,
) -> Result<BatchInference> {
    let (output, cache) = model.forward(images, mode)?;
    let (scores, multi) = extract_peaks(&output.heatmap, n_max)?;
    let arch = model.arch();
    let detections = decode_detections(
        &output.heatmap,
        &scores,
        output.size.view(),
        arch.downsample() as f64,
        arch.size_scale,
        score_floor,
        first_image_index,
    );
    Ok(BatchInference { output, cache, scores, multi, detections })
}

/// Detections over a list of images, processed `chunk` at a time.
pub fn predict(
    model: &ToyDetector,
    images: &[ArrayView3<'_, f64>],
    mode: NormMode,
    n_max: usize,
    score_floor: f64,
    chunk: usize,
) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for (c, part) in images.chunks(chunk.max(1)).enumerate() {
        let batch = to_batch(part);
        let inf = infer_batch(model, batch.view(), mode, n_max, score_floor, c * chunk.max(1))?;
        out.extend(inf.detections);
    }
    Ok(out)
}

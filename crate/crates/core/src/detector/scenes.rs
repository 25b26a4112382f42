//! Synthetic 3-class shape scenes used to train and evaluate the toy
//! detector.
//!
//! The class is carried by shape alone: every object gets a random color
//! offset from the local background, and all scenes carry mild sensor
//! grain. Recognizing small shapes from edges is what makes detection
//! scores decline under pixel-level corruptions.

use ndarray::{Array3, Array4, ArrayView3};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::detection::BoxXywh;
use crate::error::{Error, Result};
use crate::eval::GroundTruth;
use crate::rng::{derive_seed, rng_from};

pub const CANVAS: usize = 64;
pub const CLASS_NAMES: [&str; 3] = ["disk", "square", "triangle"];
pub const MIN_SIZE: f64 = 6.0;
pub const MAX_SIZE: f64 = 16.0;
const MAX_OBJECTS: usize = 6;
/// Per-pixel Gaussian sensor grain added to every rendered scene.
pub const SENSOR_GRAIN: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Disk,
    Square,
    Triangle,
}

impl Shape {
    pub fn from_class(k: usize) -> Shape {
        match k {
            0 => Shape::Disk,
            1 => Shape::Square,
            _ => Shape::Triangle,
        }
    }

    fn contains(self, cx: f64, cy: f64, size: f64, x: f64, y: f64) -> bool {
        let half = 0.5 * size;
        match self {
            Shape::Disk => (x - cx).powi(2) + (y - cy).powi(2) <= half * half,
            Shape::Square => (x - cx).abs() <= half && (y - cy).abs() <= half,
            Shape::Triangle => {
                // apex up, base at the bottom edge of the box
                let t = (y - (cy - half)) / size;
                (0.0..=1.0).contains(&t) && (x - cx).abs() <= 0.5 * size * t
            }
        }
    }
}

/// One rendered scene: an `H x W x 3` image in `[0, 1]` and its objects.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: Array3<f64>,
    pub objects: Vec<GroundTruth>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSet {
    pub scenes: Vec<Scene>,
}

impl SceneSet {
    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn images(&self) -> Vec<ArrayView3<'_, f64>> {
        self.scenes.iter().map(|s| s.image.view()).collect()
    }

    /// Ground truth grouped per image, indexed like the scenes.
    pub fn ground_truth(&self) -> Vec<Vec<GroundTruth>> {
        self.scenes.iter().map(|s| s.objects.clone()).collect()
    }

    pub fn class_counts(&self) -> [usize; 3] {
        let mut counts = [0; 3];
        for s in &self.scenes {
            for o in &s.objects {
                counts[o.class_id] += 1;
            }
        }
        counts
    }
}

/// Deterministic scene set. Classes are dealt from shuffled decks of all
/// three shapes so counts never differ by more than a couple of objects.
pub fn generate_scenes(n: usize, seed: u64) -> Result<SceneSet> {
    if n == 0 {
        return Err(Error::invalid("need at least one scene"));
    }
    let mut deck_rng = rng_from(derive_seed(seed, &[0xdec0]));
    let mut deck: Vec<usize> = Vec::new();
    let mut next_class = move || {
        if deck.is_empty() {
            deck = vec![0, 1, 2];
            deck.shuffle(&mut deck_rng);
        }
        deck.pop().expect("refilled")
    };
    let scenes = (0..n)
        .map(|i| {
            let mut rng = rng_from(derive_seed(seed, &[1, i as u64]));
            render_scene(&mut rng, &mut next_class)
        })
        .collect();
    Ok(SceneSet { scenes })
}

fn render_scene(rng: &mut ChaCha8Rng, next_class: &mut impl FnMut() -> usize) -> Scene {
    let mut image = background(rng);
    let count = rng.gen_range(1..=MAX_OBJECTS);
    let mut placed: Vec<(Shape, f64, f64, f64, [f64; 3])> = Vec::new();
    for _ in 0..count {
        let class = next_class();
        let shape = Shape::from_class(class);
        for _attempt in 0..50 {
            let size = rng.gen_range(MIN_SIZE..=MAX_SIZE);
            let half = 0.5 * size;
            let cx = rng.gen_range(half..=CANVAS as f64 - half);
            let cy = rng.gen_range(half..=CANVAS as f64 - half);
            let clear = placed.iter().all(|&(_, ox, oy, os, _)| {
                let d = ((cx - ox).powi(2) + (cy - oy).powi(2)).sqrt();
                d >= 0.5 * (size + os) + 1.0
            });
            if clear {
                let color = object_color(rng, &image, cx, cy);
                placed.push((shape, cx, cy, size, color));
                break;
            }
        }
    }
    // the first object always fits on an empty canvas
    debug_assert!(!placed.is_empty());

    for &(shape, cx, cy, size, color) in &placed {
        let x0 = (cx - 0.5 * size).floor().max(0.0) as usize;
        let x1 = ((cx + 0.5 * size).ceil() as usize).min(CANVAS);
        let y0 = (cy - 0.5 * size).floor().max(0.0) as usize;
        let y1 = ((cy + 0.5 * size).ceil() as usize).min(CANVAS);
        for py in y0..y1 {
            for px in x0..x1 {
                // 4x supersampled coverage
                let mut cover = 0.0;
                for sy in [0.25, 0.75] {
                    for sx in [0.25, 0.75] {
                        if shape.contains(cx, cy, size, px as f64 + sx, py as f64 + sy) {
                            cover += 0.25;
                        }
                    }
                }
                if cover > 0.0 {
                    for c in 0..3 {
                        let v = image[[py, px, c]];
                        image[[py, px, c]] = v + cover * (color[c] - v);
                    }
                }
            }
        }
    }
    let grain = Normal::new(0.0, SENSOR_GRAIN).expect("positive sigma");
    image.mapv_inplace(|v| quantize(v + grain.sample(rng)));
    let objects = placed
        .iter()
        .map(|&(shape, cx, cy, size, _)| GroundTruth {
            class_id: shape as usize,
            bbox: BoxXywh::new(cx, cy, size, size),
        })
        .collect();
    Scene { image, objects }
}

/// Class-independent color: the local background shifted by a luminance
/// offset of 0.15-0.4, lighter or darker, plus a small per-channel tint.
/// The direction is flipped when the shift would leave `[0, 1]`.
fn object_color(rng: &mut ChaCha8Rng, background: &Array3<f64>, cx: f64, cy: f64) -> [f64; 3] {
    let (py, px) = ((cy as usize).min(CANVAS - 1), (cx as usize).min(CANVAS - 1));
    let bg = [0, 1, 2].map(|c| background[[py, px, c]]);
    let magnitude = rng.gen_range(0.15..0.4);
    let lighter = rng.gen::<bool>();
    let tint = [0, 1, 2].map(|_| rng.gen_range(-0.1..0.1));
    let mean = bg.iter().sum::<f64>() / 3.0;
    let offset = if (lighter && mean + magnitude <= 0.95) || mean - magnitude < 0.05 { magnitude } else { -magnitude };
    [0, 1, 2].map(|c| (bg[c] + offset + tint[c]).clamp(0.0, 1.0))
}

/// Smooth random field: a coarse 5x5 grid of gray-ish colors, bilinearly
/// upsampled.
fn background(rng: &mut ChaCha8Rng) -> Array3<f64> {
    const GRID: usize = 5;
    let base = rng.gen_range(0.3..0.6);
    let mut grid = [[[0.0f64; 3]; GRID]; GRID];
    for row in grid.iter_mut() {
        for cell in row.iter_mut() {
            let shade = rng.gen_range(-0.12..0.12);
            for v in cell.iter_mut() {
                *v = base + shade + rng.gen_range(-0.05..0.05);
            }
        }
    }
    let scale = (GRID - 1) as f64 / (CANVAS - 1) as f64;
    Array3::from_shape_fn((CANVAS, CANVAS, 3), |(y, x, c)| {
        let gy = y as f64 * scale;
        let gx = x as f64 * scale;
        let (iy, ix) = ((gy as usize).min(GRID - 2), (gx as usize).min(GRID - 2));
        let (fy, fx) = (gy - iy as f64, gx - ix as f64);
        let top = grid[iy][ix][c] * (1.0 - fx) + grid[iy][ix + 1][c] * fx;
        let bottom = grid[iy + 1][ix][c] * (1.0 - fx) + grid[iy + 1][ix + 1][c] * fx;
        (top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0)
    })
}

/// Rounds to the 8-bit grid so scenes survive a PNG round trip exactly.
pub fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Stacks `H x W x 3` images into a `B x 3 x H x W` batch.
pub fn to_batch(images: &[ArrayView3<'_, f64>]) -> Array4<f64> {
    let (h, w, c) = images.first().map(|i| i.dim()).unwrap_or((0, 0, 3));
    let mut out = Array4::zeros((images.len(), c, h, w));
    for (b, img) in images.iter().enumerate() {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[[b, ch, y, x]] = img[[y, x, ch]];
                }
            }
        }
    }
    out
}

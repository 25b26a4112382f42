//! Score-map data model and heatmap peak decoding.
//!
//! A detector emits per-class heatmaps; decoding turns them into a fixed
//! number of object slots per image. The gathered scores keep a record of
//! where they came from so that gradients of any loss defined on the slots
//! can be scattered back onto the heatmap (the selection itself is treated
//! as a constant).

use ndarray::{Array2, Array3, Array4, ArrayView4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::PROB_EPS;

/// Per-class detection confidences, `B x K x H x W`, every entry in `(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapBatch {
    values: Array4<f64>,
}

impl HeatmapBatch {
    /// Wraps `values`, clamping every entry into `[eps, 1 - eps]`.
    pub fn new(mut values: Array4<f64>) -> Result<Self> {
        let (b, k, h, w) = values.dim();
        if b == 0 || k == 0 || h == 0 || w == 0 {
            return Err(Error::invalid(format!("heatmap must be non-empty, got {b}x{k}x{h}x{w}")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("heatmap contains non-finite values"));
        }
        values.mapv_inplace(|v| v.clamp(PROB_EPS, 1.0 - PROB_EPS));
        Ok(Self { values })
    }

    pub fn values(&self) -> ArrayView4<'_, f64> {
        self.values.view()
    }

    pub fn into_inner(self) -> Array4<f64> {
        self.values
    }

    pub fn batch(&self) -> usize {
        self.values.dim().0
    }

    pub fn classes(&self) -> usize {
        self.values.dim().1
    }

    pub fn height(&self) -> usize {
        self.values.dim().2
    }

    pub fn width(&self) -> usize {
        self.values.dim().3
    }
}

/// Top-`n_max` decoded object scores per image.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreBatch {
    /// `B x N_m`; zero on invalid slots.
    pub scores: Array2<f64>,
    /// `B x N_m`; channel of the peak (0 on invalid slots).
    pub class_ids: Array2<usize>,
    /// `B x N_m x 2` grid (row, col) of each peak.
    pub locations: Array3<usize>,
    /// `B x N_m`; whether the slot holds a real peak.
    pub valid: Array2<bool>,
}

impl ScoreBatch {
    /// Builds a batch from per-image score lists. Class ids and locations are
    /// zero. Mostly useful for exercising the losses directly.
    pub fn from_scores(per_image: &[Vec<f64>], n_max: usize) -> Result<Self> {
        let b = per_image.len();
        if b == 0 || n_max == 0 {
            return Err(Error::invalid("score batch needs B >= 1 and n_max >= 1"));
        }
        let mut out = Self::empty(b, n_max);
        for (i, scores) in per_image.iter().enumerate() {
            if scores.len() > n_max {
                return Err(Error::invalid(format!(
                    "image {i} has {} scores, more than n_max = {n_max}",
                    scores.len()
                )));
            }
            let mut sorted = scores.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            for (j, &s) in sorted.iter().enumerate() {
                if !(s > 0.0 && s < 1.0) {
                    return Err(Error::invalid(format!("score {s} outside (0, 1)")));
                }
                out.scores[[i, j]] = s;
                out.valid[[i, j]] = true;
            }
        }
        Ok(out)
    }

    pub(crate) fn empty(b: usize, n_max: usize) -> Self {
        Self {
            scores: Array2::zeros((b, n_max)),
            class_ids: Array2::zeros((b, n_max)),
            locations: Array3::zeros((b, n_max, 2)),
            valid: Array2::from_elem((b, n_max), false),
        }
    }

    pub fn batch(&self) -> usize {
        self.scores.nrows()
    }

    pub fn n_max(&self) -> usize {
        self.scores.ncols()
    }

    /// Valid scores of image `i`, in slot order.
    pub fn image_scores(&self, i: usize) -> impl Iterator<Item = f64> + '_ {
        self.scores
            .row(i)
            .into_iter()
            .zip(self.valid.row(i))
            .filter(|(_, &v)| v)
            .map(|(&s, _)| s)
            .collect::<Vec<_>>()
            .into_iter()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Full per-class confidence vector of every decoded slot, `B x N_m x K`.
/// The `K` values at a slot are independent confidences and need not sum
/// to one.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiClassScoreBatch {
    pub class_scores: Array3<f64>,
    pub valid: Array2<bool>,
}

impl MultiClassScoreBatch {
    pub fn classes(&self) -> usize {
        self.class_scores.dim().2
    }

    /// Builds the matching single-score view: per slot the max over classes
    /// and its (lowest-index) argmax. Locations are zero.
    pub fn top_scores(&self) -> ScoreBatch {
        let (b, n, _) = self.class_scores.dim();
        let mut out = ScoreBatch::empty(b, n);
        for i in 0..b {
            for j in 0..n {
                if !self.valid[[i, j]] {
                    continue;
                }
                let (k, s) = argmax_lowest(self.class_scores.slice(ndarray::s![i, j, ..]).iter().copied());
                out.scores[[i, j]] = s;
                out.class_ids[[i, j]] = k;
                out.valid[[i, j]] = true;
            }
        }
        out
    }
}

/// Index and value of the maximum, ties resolved to the lowest index.
pub(crate) fn argmax_lowest(values: impl Iterator<Item = f64>) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (k, v) in values.enumerate() {
        if v > best.1 {
            best = (k, v);
        }
    }
    best
}

/// Axis-aligned box in pixel coordinates (center, size).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxXywh {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxXywh {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn x0(&self) -> f64 {
        self.cx - 0.5 * self.w
    }

    pub fn x1(&self) -> f64 {
        self.cx + 0.5 * self.w
    }

    pub fn y0(&self) -> f64 {
        self.cy - 0.5 * self.h
    }

    pub fn y1(&self) -> f64 {
        self.cy + 0.5 * self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_index: usize,
    pub class_id: usize,
    pub score: f64,
    #[serde(rename = "box")]
    pub bbox: BoxXywh,
    /// Raw extra regressions (size head output and sub-cell offsets).
    #[serde(default)]
    pub payload: Vec<f64>,
}

/// Decodes the top `n_max` heatmap peaks of each image.
///
/// A cell `(k, r, c)` is a peak when its value is `>=` every value in its
/// 3x3 neighborhood of channel `k` and channel `k` is the (lowest-index)
/// argmax of the class vector at `(r, c)`. Peaks of all classes are pooled
/// per image and ranked by descending score, ties in `(row, col, class)`
/// scan order.
pub fn extract_peaks(heatmap: &HeatmapBatch, n_max: usize) -> Result<(ScoreBatch, MultiClassScoreBatch)> {
    if n_max == 0 {
        return Err(Error::invalid("n_max must be at least 1"));
    }
    let hm = heatmap.values();
    let (b, k, h, w) = hm.dim();
    let mut scores = ScoreBatch::empty(b, n_max);
    let mut multi = MultiClassScoreBatch {
        class_scores: Array3::zeros((b, n_max, k)),
        valid: Array2::from_elem((b, n_max), false),
    };

    let mut candidates: Vec<(f64, usize, usize, usize)> = Vec::new();
    for i in 0..b {
        candidates.clear();
        for r in 0..h {
            for c in 0..w {
                let (best_k, _) = argmax_lowest((0..k).map(|ch| hm[[i, ch, r, c]]));
                let v = hm[[i, best_k, r, c]];
                if is_local_max(&hm, i, best_k, r, c) {
                    candidates.push((v, r, c, best_k));
                }
            }
        }
        // Stable sort on score keeps the row-major scan order among ties.
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0));
        for (j, &(v, r, c, ch)) in candidates.iter().take(n_max).enumerate() {
            scores.scores[[i, j]] = v;
            scores.class_ids[[i, j]] = ch;
            scores.locations[[i, j, 0]] = r;
            scores.locations[[i, j, 1]] = c;
            scores.valid[[i, j]] = true;
            multi.valid[[i, j]] = true;
            for kk in 0..k {
                multi.class_scores[[i, j, kk]] = hm[[i, kk, r, c]];
            }
        }
    }
    Ok((scores, multi))
}

fn is_local_max(hm: &ArrayView4<'_, f64>, i: usize, ch: usize, r: usize, c: usize) -> bool {
    let (_, _, h, w) = hm.dim();
    let v = hm[[i, ch, r, c]];
    let r0 = r.saturating_sub(1);
    let r1 = (r + 1).min(h - 1);
    let c0 = c.saturating_sub(1);
    let c1 = (c + 1).min(w - 1);
    for rr in r0..=r1 {
        for cc in c0..=c1 {
            if hm[[i, ch, rr, cc]] > v {
                return false;
            }
        }
    }
    true
}

/// Scatters slot-level gradients back onto a heatmap-shaped buffer: the
/// adjoint of the gather performed by [`extract_peaks`].
pub fn scatter_to_heatmap(
    scores: &ScoreBatch,
    d_scores: Option<&Array2<f64>>,
    d_class_scores: Option<&Array3<f64>>,
    dims: (usize, usize, usize, usize),
) -> Array4<f64> {
    let mut grad = Array4::zeros(dims);
    let k = dims.1;
    for i in 0..scores.batch() {
        for j in 0..scores.n_max() {
            if !scores.valid[[i, j]] {
                continue;
            }
            let r = scores.locations[[i, j, 0]];
            let c = scores.locations[[i, j, 1]];
            if let Some(ds) = d_scores {
                grad[[i, scores.class_ids[[i, j]], r, c]] += ds[[i, j]];
            }
            if let Some(dcs) = d_class_scores {
                for kk in 0..k {
                    grad[[i, kk, r, c]] += dcs[[i, j, kk]];
                }
            }
        }
    }
    grad
}

/// Turns decoded slots into boxes.
///
/// `size_map` holds the regressed box width and height per grid cell in
/// units of `size_scale` pixels. The center is refined below cell resolution
/// by fitting a parabola to the log-heatmap around the peak along each axis.
pub fn decode_detections(
    heatmap: &HeatmapBatch,
    scores: &ScoreBatch,
    size_map: ArrayView4<'_, f64>,
    stride: f64,
    size_scale: f64,
    score_floor: f64,
    first_image_index: usize,
) -> Vec<Detection> {
    let hm = heatmap.values();
    let (_, _, h, w) = hm.dim();
    let mut out = Vec::new();
    for i in 0..scores.batch() {
        for j in 0..scores.n_max() {
            if !scores.valid[[i, j]] || scores.scores[[i, j]] < score_floor {
                continue;
            }
            let k = scores.class_ids[[i, j]];
            let r = scores.locations[[i, j, 0]];
            let c = scores.locations[[i, j, 1]];
            let center = hm[[i, k, r, c]].ln();
            let dy = if r > 0 && r + 1 < h {
                parabolic_offset(hm[[i, k, r - 1, c]].ln(), center, hm[[i, k, r + 1, c]].ln())
            } else {
                0.0
            };
            let dx = if c > 0 && c + 1 < w {
                parabolic_offset(hm[[i, k, r, c - 1]].ln(), center, hm[[i, k, r, c + 1]].ln())
            } else {
                0.0
            };
            let sw = size_map[[i, 0, r, c]];
            let sh = size_map[[i, 1, r, c]];
            let bbox = BoxXywh::new(
                (c as f64 + 0.5 + dx) * stride,
                (r as f64 + 0.5 + dy) * stride,
                (sw * size_scale).max(1.0),
                (sh * size_scale).max(1.0),
            );
            out.push(Detection {
                image_index: first_image_index + i,
                class_id: k,
                score: scores.scores[[i, j]],
                bbox,
                payload: vec![sw, sh, dx, dy],
            });
        }
    }
    out
}

fn parabolic_offset(left: f64, center: f64, right: f64) -> f64 {
    let curvature = left - 2.0 * center + right;
    if curvature >= -1e-12 {
        return 0.0;
    }
    (0.5 * (left - right) / curvature).clamp(-0.5, 0.5)
}

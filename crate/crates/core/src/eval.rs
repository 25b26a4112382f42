//! Detection matching, AP at 40 recall points and score diagnostics.

use serde::{Deserialize, Serialize};

use crate::detection::{BoxXywh, Detection};
use crate::error::{Error, Result};

pub const RECALL_POINTS: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub class_id: usize,
    #[serde(rename = "box")]
    pub bbox: BoxXywh,
}

/// Axis-aligned intersection over union.
pub fn iou(a: &BoxXywh, b: &BoxXywh) -> Result<f64> {
    for bx in [a, b] {
        if !(bx.w > 0.0 && bx.h > 0.0) || !bx.cx.is_finite() || !bx.cy.is_finite() {
            return Err(Error::invalid(format!("degenerate box {bx:?}")));
        }
    }
    let iw = (a.x1().min(b.x1()) - a.x0().max(b.x0())).max(0.0);
    let ih = (a.y1().min(b.y1()) - a.y0().max(b.y0())).max(0.0);
    let inter = iw * ih;
    Ok(inter / (a.area() + b.area() - inter))
}

/// Outcome of greedy score-ordered matching, indexed like the input
/// detections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub true_positive: Vec<bool>,
    pub matched_gt: Vec<Option<usize>>,
    pub iou: Vec<f64>,
    /// Per image, ground-truth objects left unmatched.
    pub unmatched_gt: Vec<usize>,
}

/// Detection indices by descending score, ties by lower index.
fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    order
}

/// Greedily assigns each detection, in descending score order, to the
/// unmatched same-class ground truth of its image with the highest IoU,
/// provided that IoU reaches `iou_threshold`.
pub fn match_detections(dets: &[Detection], gt: &[Vec<GroundTruth>], iou_threshold: f64) -> Result<MatchResult> {
    let mut taken: Vec<Vec<bool>> = gt.iter().map(|g| vec![false; g.len()]).collect();
    let mut result = MatchResult {
        true_positive: vec![false; dets.len()],
        matched_gt: vec![None; dets.len()],
        iou: vec![0.0; dets.len()],
        unmatched_gt: Vec::new(),
    };
    for d in score_order(dets) {
        let det = &dets[d];
        let Some(objects) = gt.get(det.image_index) else {
            return Err(Error::invalid(format!(
                "detection refers to image {} but only {} images have ground truth",
                det.image_index,
                gt.len()
            )));
        };
        let mut best: Option<(usize, f64)> = None;
        for (g, obj) in objects.iter().enumerate() {
            if obj.class_id != det.class_id || taken[det.image_index][g] {
                continue;
            }
            let v = iou(&det.bbox, &obj.bbox)?;
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, v)) = best {
            result.iou[d] = v;
            if v >= iou_threshold {
                taken[det.image_index][g] = true;
                result.true_positive[d] = true;
                result.matched_gt[d] = Some(g);
            }
        }
    }
    result.unmatched_gt = taken.iter().map(|t| t.iter().filter(|&&m| !m).count()).collect();
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    /// `None` for classes without ground truth.
    pub per_class: Vec<Option<f64>>,
    /// Unweighted mean over classes with ground truth.
    pub map: Option<f64>,
    pub num_detections: Vec<usize>,
    pub num_ground_truth: Vec<usize>,
}

/// Interpolated precision averaged over recall levels `1/40, ..., 1`.
///
/// `tp_flags` are the match outcomes of one class's detections in
/// descending score order.
pub fn ap_r40_from_flags(tp_flags: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    // (tp, rank) after each detection
    let mut points = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (rank, &hit) in tp_flags.iter().enumerate() {
        tp += hit as usize;
        points.push((tp, rank + 1));
    }
    // suffix max of precision
    let mut best = vec![0.0f64; points.len() + 1];
    for i in (0..points.len()).rev() {
        let (tp, n) = points[i];
        best[i] = best[i + 1].max(tp as f64 / n as f64);
    }
    let mut sum = 0.0;
    let mut cursor = 0;
    for r in 1..=RECALL_POINTS {
        // first point whose recall reaches r/40, compared exactly in integers
        while cursor < points.len() && points[cursor].0 * RECALL_POINTS < r * num_gt {
            cursor += 1;
        }
        sum += best[cursor];
    }
    sum / RECALL_POINTS as f64
}

pub fn average_precision_r40(
    dets: &[Detection],
    gt: &[Vec<GroundTruth>],
    iou_threshold: f64,
    classes: usize,
) -> Result<ApResult> {
    if !(iou_threshold > 0.0 && iou_threshold < 1.0) {
        return Err(Error::invalid(format!("IoU threshold {iou_threshold} outside (0, 1)")));
    }
    if let Some(d) = dets.iter().find(|d| d.class_id >= classes) {
        return Err(Error::invalid(format!("class id {} >= {classes}", d.class_id)));
    }
    let matches = match_detections(dets, gt, iou_threshold)?;
    let order = score_order(dets);
    let mut num_gt = vec![0usize; classes];
    for obj in gt.iter().flatten() {
        if obj.class_id < classes {
            num_gt[obj.class_id] += 1;
        }
    }
    let mut per_class = Vec::with_capacity(classes);
    let mut num_detections = vec![0usize; classes];
    for k in 0..classes {
        let flags: Vec<bool> =
            order.iter().filter(|&&d| dets[d].class_id == k).map(|&d| matches.true_positive[d]).collect();
        num_detections[k] = flags.len();
        per_class.push((num_gt[k] > 0).then(|| ap_r40_from_flags(&flags, num_gt[k])));
    }
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    let map = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(ApResult { per_class, map, num_detections, num_ground_truth: num_gt })
}

/// Keeps detections scoring at least `threshold`.
pub fn filter_by_score(dets: &[Detection], threshold: f64) -> Vec<Detection> {
    dets.iter().filter(|d| d.score >= threshold).cloned().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreHistogram {
    /// `bins + 1` equally spaced edges over `[0, 1]`.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub total: usize,
    pub below_gamma: usize,
    pub above_gamma: usize,
    pub below_alpha: usize,
    pub above_alpha: usize,
}

/// Histogram of detection scores `>= eta`. "Above" counts are inclusive of
/// the threshold.
pub fn score_histogram(dets: &[Detection], bins: usize, eta: f64, gamma: f64, alpha: f64) -> Result<ScoreHistogram> {
    if bins < 2 {
        return Err(Error::invalid("histogram needs at least two bins"));
    }
    let mut h = ScoreHistogram {
        edges: (0..=bins).map(|i| i as f64 / bins as f64).collect(),
        counts: vec![0; bins],
        total: 0,
        below_gamma: 0,
        above_gamma: 0,
        below_alpha: 0,
        above_alpha: 0,
    };
    for d in dets.iter().filter(|d| d.score >= eta) {
        let bin = ((d.score * bins as f64) as usize).min(bins - 1);
        h.counts[bin] += 1;
        h.total += 1;
        if d.score >= gamma {
            h.above_gamma += 1;
        } else {
            h.below_gamma += 1;
        }
        if d.score >= alpha {
            h.above_alpha += 1;
        } else {
            h.below_alpha += 1;
        }
    }
    Ok(h)
}

/// Mean score of the given detections, `None` when empty.
pub fn mean_score(dets: &[Detection]) -> Option<f64> {
    (!dets.is_empty()).then(|| dets.iter().map(|d| d.score).sum::<f64>() / dets.len() as f64)
}

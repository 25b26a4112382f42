//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use monotta::detection::{BoxXywh, Detection, MultiClassScoreBatch, ScoreBatch};
use monotta::detector::{infer_batch, GradScope, NormMode, ToyDetector};
use monotta::eval::GroundTruth;
use monotta::tta::{select_adaptable_parameters, MonoTta, TtaConfig};
use ndarray::{Array2, Array3, Array4};
use rand::Rng;

// ---------------------------------------------------------------- losses

/// `(1/B) * sum(-ln s)` over valid slots with `s >= alpha`.
pub fn ao_oracle(scores: &[Vec<Option<f64>>], alpha: f64) -> f64 {
    let b = scores.len() as f64;
    let mut total = 0.0;
    for image in scores {
        for s in image.iter().flatten() {
            if *s >= alpha {
                total += -s.ln();
            }
        }
    }
    total / b
}

/// Per-class errors `e_k = sum -(1 - p) ln(1 - p)` over low-score slots
/// whose sampled negative is `k`, each divided by its slot count.
pub fn nreg_oracle(
    top: &[Vec<Option<f64>>],
    class_scores: &[Vec<Vec<f64>>],
    negatives: &[Vec<i64>],
    eta: f64,
    alpha: f64,
    classes: usize,
) -> f64 {
    let mut loss = 0.0;
    #[allow(clippy::needless_range_loop)]
    for k in 0..classes {
        let mut e = 0.0;
        let mut n = 0usize;
        for i in 0..top.len() {
            for j in 0..top[i].len() {
                let Some(s) = top[i][j] else { continue };
                if s < eta || s >= alpha || negatives[i][j] != k as i64 {
                    continue;
                }
                let p = class_scores[i][j][k];
                let weight = 1.0 - p;
                e += -weight * (1.0 - p).ln();
                n += 1;
            }
        }
        if n > 0 {
            loss += e / n as f64;
        }
    }
    loss
}

/// Random multi-class slots: a valid prefix of each image's `n` slots with
/// class scores in `[0.01, 0.99]`.
pub fn random_multi(rng: &mut impl Rng, b: usize, n: usize, k: usize) -> MultiClassScoreBatch {
    let mut class_scores = Array3::zeros((b, n, k));
    let mut valid = Array2::from_elem((b, n), false);
    for i in 0..b {
        let count = rng.gen_range(0..=n);
        for j in 0..count {
            valid[[i, j]] = true;
            for kk in 0..k {
                class_scores[[i, j, kk]] = rng.gen_range(0.01..0.99);
            }
        }
    }
    MultiClassScoreBatch { class_scores, valid }
}

pub fn top_as_vecs(scores: &ScoreBatch) -> Vec<Vec<Option<f64>>> {
    (0..scores.batch())
        .map(|i| (0..scores.n_max()).map(|j| scores.valid[[i, j]].then(|| scores.scores[[i, j]])).collect())
        .collect()
}

pub fn multi_as_vecs(multi: &MultiClassScoreBatch) -> Vec<Vec<Vec<f64>>> {
    let (b, n, k) = multi.class_scores.dim();
    (0..b).map(|i| (0..n).map(|j| (0..k).map(|kk| multi.class_scores[[i, j, kk]]).collect()).collect()).collect()
}

// ------------------------------------------------------- gradient check

pub struct GradCheck {
    pub params: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic_norm: f64,
    pub n_high: usize,
    pub n_low: usize,
}

/// Compares the analytic gradient of the total adaptation loss with central
/// differences of a from-scratch loss evaluation. Peak locations, classes,
/// the high/low slot partition, sampled negatives and the `1 - p` weights
/// are frozen at the unperturbed point.
pub fn gradient_check(
    model: &ToyDetector,
    images: &Array4<f64>,
    config: &TtaConfig,
    alpha: f64,
    step: f64,
    floor: f64,
) -> GradCheck {
    let inf = infer_batch(model, images.view(), NormMode::Batch, config.n_max, config.eta, 0).unwrap();
    let seed = 17;
    let eval = MonoTta::objective(config, &inf, alpha, seed).unwrap();
    let grads = model.backward(&inf.cache, eval.d_heatmap.view(), None, GradScope::NormAffine);
    let subset = select_adaptable_parameters(model).unwrap();
    let analytic = subset.gradient(&grads);

    struct Slot {
        image: usize,
        class: usize,
        row: usize,
        col: usize,
        high: bool,
        negative: Option<(usize, f64)>,
    }
    let scores = &inf.scores;
    let mut slots = Vec::new();
    for i in 0..scores.batch() {
        for j in 0..scores.n_max() {
            if !scores.valid[[i, j]] {
                continue;
            }
            let s = scores.scores[[i, j]];
            let neg = eval.negatives[[i, j]];
            let low = s >= config.eta && s < alpha && neg >= 0;
            slots.push(Slot {
                image: i,
                class: scores.class_ids[[i, j]],
                row: scores.locations[[i, j, 0]],
                col: scores.locations[[i, j, 1]],
                high: s >= alpha,
                negative: low.then(|| (neg as usize, 1.0 - inf.multi.class_scores[[i, j, neg as usize]])),
            });
        }
    }
    let b = images.dim().0 as f64;
    let k = model.arch().classes;
    let loss_at = |m: &ToyDetector| -> f64 {
        let (out, _) = m.forward(images.view(), NormMode::Batch).unwrap();
        let hm = out.heatmap.values();
        let mut ao = 0.0;
        let mut errors = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for s in &slots {
            if s.high {
                ao -= hm[[s.image, s.class, s.row, s.col]].ln();
            }
            if let Some((neg, weight)) = s.negative {
                errors[neg] -= weight * (1.0 - hm[[s.image, neg, s.row, s.col]]).ln();
                counts[neg] += 1;
            }
        }
        let nreg: f64 = errors.iter().zip(&counts).filter(|(_, &c)| c > 0).map(|(e, &c)| e / c as f64).sum();
        ao / b + config.lambda_balance * nreg
    };

    let base = subset.values(model);
    let mut probe = model.clone();
    let mut max_rel = 0.0;
    let mut worst = 0;
    for p in 0..base.len() {
        let mut v = base.clone();
        v[p] = base[p] + step;
        subset.assign(&mut probe, &v);
        let plus = loss_at(&probe);
        v[p] = base[p] - step;
        subset.assign(&mut probe, &v);
        let minus = loss_at(&probe);
        let numeric = (plus - minus) / (2.0 * step);
        let rel = (analytic[p] - numeric).abs() / analytic[p].abs().max(numeric.abs()).max(floor);
        if rel > max_rel {
            max_rel = rel;
            worst = p;
        }
    }
    GradCheck {
        params: base.len(),
        max_rel_error: max_rel,
        worst_index: worst,
        analytic_norm: analytic.iter().map(|g| g * g).sum::<f64>().sqrt(),
        n_high: eval.breakdown.n_high,
        n_low: eval.breakdown.n_low,
    }
}

/// `(eta, alpha)` placing about half of the decoded slots of `images` above
/// alpha and the rest in `[eta, alpha)`, so both loss terms are active.
pub fn straddling_thresholds(model: &ToyDetector, images: &Array4<f64>, n_max: usize) -> (f64, f64) {
    let inf = infer_batch(model, images.view(), NormMode::Batch, n_max, 0.0, 0).unwrap();
    let mut s: Vec<f64> =
        inf.scores.scores.iter().zip(inf.scores.valid.iter()).filter(|(_, &v)| v).map(|(&s, _)| s).collect();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let alpha = 0.5 * (s[s.len() / 2 - 1] + s[s.len() / 2]);
    (0.5 * s[0], alpha)
}

// ------------------------------------------------------------------ AP

fn iou_oracle(a: &BoxXywh, b: &BoxXywh) -> f64 {
    let ix = ((a.cx + a.w / 2.0).min(b.cx + b.w / 2.0) - (a.cx - a.w / 2.0).max(b.cx - b.w / 2.0)).max(0.0);
    let iy = ((a.cy + a.h / 2.0).min(b.cy + b.h / 2.0) - (a.cy - a.h / 2.0).max(b.cy - b.h / 2.0)).max(0.0);
    let inter = ix * iy;
    inter / (a.w * a.h + b.w * b.h - inter)
}

/// True-positive count among the detections of class `k` scoring at least
/// `t`, matched greedily from the highest score down.
fn true_positives_at(dets: &[Detection], gt: &[Vec<GroundTruth>], k: usize, t: f64, iou_thr: f64) -> (usize, usize) {
    let mut kept: Vec<&Detection> = dets.iter().filter(|d| d.class_id == k && d.score >= t).collect();
    kept.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    let mut used: Vec<Vec<bool>> = gt.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0;
    for d in &kept {
        let mut best: Option<(usize, f64)> = None;
        for (g, obj) in gt[d.image_index].iter().enumerate() {
            if obj.class_id != k || used[d.image_index][g] {
                continue;
            }
            let o = iou_oracle(&d.bbox, &obj.bbox);
            if o >= iou_thr && best.is_none_or(|(_, bo)| o > bo) {
                best = Some((g, o));
            }
        }
        if let Some((g, _)) = best {
            used[d.image_index][g] = true;
            tp += 1;
        }
    }
    (tp, kept.len())
}

/// AP at 40 recall points from an explicit precision/recall curve: one
/// operating point per distinct detection score, matching redone from
/// scratch at every threshold. Requires distinct scores within a class.
pub fn ap_r40_oracle(dets: &[Detection], gt: &[Vec<GroundTruth>], iou_thr: f64, classes: usize) -> Vec<Option<f64>> {
    (0..classes)
        .map(|k| {
            let num_gt = gt.iter().flatten().filter(|g| g.class_id == k).count();
            if num_gt == 0 {
                return None;
            }
            let curve: Vec<(usize, usize)> = dets
                .iter()
                .filter(|d| d.class_id == k)
                .map(|d| true_positives_at(dets, gt, k, d.score, iou_thr))
                .collect();
            let mut sum = 0.0;
            for r in 1..=40usize {
                let mut best = 0.0f64;
                for &(tp, n) in &curve {
                    if tp * 40 >= r * num_gt {
                        best = best.max(tp as f64 / n as f64);
                    }
                }
                sum += best;
            }
            Some(sum / 40.0)
        })
        .collect()
}

pub fn random_box(rng: &mut impl Rng) -> BoxXywh {
    BoxXywh::new(rng.gen_range(8.0..56.0), rng.gen_range(8.0..56.0), rng.gen_range(6.0..16.0), rng.gen_range(6.0..16.0))
}

/// Up to three images with a few objects each and at most ten detections,
/// most of them jittered copies of ground truth. Scores are distinct.
pub fn random_ap_instance(rng: &mut impl Rng, classes: usize) -> (Vec<Detection>, Vec<Vec<GroundTruth>>) {
    let images = rng.gen_range(1..=3);
    let gt: Vec<Vec<GroundTruth>> = (0..images)
        .map(|_| {
            (0..rng.gen_range(0..=4))
                .map(|_| GroundTruth { class_id: rng.gen_range(0..classes), bbox: random_box(rng) })
                .collect()
        })
        .collect();
    let all: Vec<(usize, GroundTruth)> =
        gt.iter().enumerate().flat_map(|(i, g)| g.iter().map(move |o| (i, *o))).collect();
    let n = rng.gen_range(0..=10);
    let dets = (0..n)
        .map(|_| {
            let (image_index, class_id, bbox) = if !all.is_empty() && rng.gen_bool(0.7) {
                let (i, o) = all[rng.gen_range(0..all.len())];
                let j = |rng: &mut dyn rand::RngCore| rng.gen_range(-2.5..2.5);
                let b = BoxXywh::new(o.bbox.cx + j(rng), o.bbox.cy + j(rng), o.bbox.w + j(rng).abs(), o.bbox.h);
                let class = if rng.gen_bool(0.85) { o.class_id } else { rng.gen_range(0..classes) };
                (i, class, b)
            } else {
                (rng.gen_range(0..images), rng.gen_range(0..classes), random_box(rng))
            };
            Detection { image_index, class_id, score: rng.gen_range(0.0..1.0), bbox, payload: Vec::new() }
        })
        .collect();
    (dets, gt)
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

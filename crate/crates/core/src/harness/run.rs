//! Executes the policy x corruption x seed grid of an experiment.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use ndarray::{Array3, ArrayView3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{DataSource, ExperimentConfig, StreamSpec};
use super::report::render_report;
use crate::baselines::PolicyKind;
use crate::corruption::in_memory_batches;
use crate::detector::{load_checkpoint, scenes::CLASS_NAMES, to_batch, ToyDetector, TrainingRecord};
use crate::error::{Error, Result};
use crate::eval::{average_precision_r40, filter_by_score, score_histogram, GroundTruth, ScoreHistogram};
use crate::imageio::read_labeled_dir;
use crate::tta::{run_adaptation, select_adaptable_parameters, AdaptationRun, ImageBatch, StepRecord};

pub const QUINTILES: usize = 5;

/// Labeled images every cell streams over.
#[derive(Debug, Clone)]
pub struct EvalData {
    pub images: Arc<Vec<Array3<f64>>>,
    pub ground_truth: Vec<Vec<GroundTruth>>,
}

impl EvalData {
    pub fn new(images: Vec<Array3<f64>>, ground_truth: Vec<Vec<GroundTruth>>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Config("evaluation data has no images".into()));
        }
        if images.len() != ground_truth.len() {
            return Err(Error::invalid("one ground-truth list per image is required"));
        }
        Ok(Self { images: Arc::new(images), ground_truth })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn load(source: &DataSource, training: Option<&TrainingRecord>) -> Result<Self> {
        let from_scenes = |s: crate::detector::SceneSet| {
            let gt = s.ground_truth();
            Self::new(s.scenes.into_iter().map(|s| s.image).collect(), gt)
        };
        match source {
            DataSource::Validation => {
                let record = training.ok_or_else(|| {
                    Error::Config("checkpoint has no training record; choose another data source".into())
                })?;
                from_scenes(record.config.validation_scenes()?)
            }
            DataSource::Generated { n, seed } => from_scenes(crate::detector::generate_scenes(*n, *seed)?),
            DataSource::Directory { path } => {
                let d = read_labeled_dir(path)?;
                Self::new(d.images, d.ground_truth)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub stream: StreamSpec,
    pub policy: PolicyKind,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaSummary {
    pub first: f64,
    pub last: f64,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

impl AlphaSummary {
    fn of(alpha: &[f64]) -> Option<Self> {
        let (&first, &last) = (alpha.first()?, alpha.last()?);
        Some(Self {
            first,
            last,
            min: alpha.iter().copied().fold(f64::INFINITY, f64::min),
            max: alpha.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean: alpha.iter().sum::<f64>() / alpha.len() as f64,
        })
    }
}

/// Stream statistics over one fifth of the images, in stream order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuintileStats {
    pub images: usize,
    /// Reported detections (score `>= eta`).
    pub detections: usize,
    /// Detections scoring at least `gamma` (high-score objects).
    pub above_gamma: usize,
    /// Detections in `[eta, gamma)` (low-score objects).
    pub below_gamma: usize,
    pub mean_score: Option<f64>,
    /// Mean over batches of the sampled negative-class score.
    pub neg_score_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub policy: PolicyKind,
    pub corruption: String,
    pub severity: Option<u8>,
    pub seed: u64,
    pub per_class_ap: Vec<Option<f64>>,
    pub map: Option<f64>,
    pub num_images: usize,
    /// Detections kept for AP (score `>= score_threshold`).
    pub num_evaluated: usize,
    pub alpha: Option<AlphaSummary>,
    pub quintiles: Vec<QuintileStats>,
    /// The non-adaptable parameters hash identically before and after.
    pub frozen_unchanged: bool,
    pub wall_clock_s: f64,
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub record: MetricsRecord,
    pub alpha_trajectory: Vec<f64>,
    pub histogram: ScoreHistogram,
    pub steps: Vec<StepRecord>,
}

/// One line of `steps.jsonl`.
#[derive(Debug, Clone, Serialize)]
struct StepLine<'a> {
    corruption: String,
    severity: Option<u8>,
    seed: u64,
    #[serde(flatten)]
    record: &'a StepRecord,
}

#[derive(Debug, Clone)]
pub struct CellOutcome {
    pub key: CellKey,
    pub result: std::result::Result<CellResult, String>,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub outcomes: Vec<CellOutcome>,
    /// Clean validation mAP stored with the checkpoint, if any.
    pub checkpoint_clean_map: Option<f64>,
}

impl ExperimentReport {
    pub fn records(&self) -> Vec<&MetricsRecord> {
        self.outcomes.iter().filter_map(|o| o.result.as_ref().ok()).map(|r| &r.record).collect()
    }

    pub fn failures(&self) -> Vec<(&CellKey, &str)> {
        self.outcomes.iter().filter_map(|o| o.result.as_ref().err().map(|e| (&o.key, e.as_str()))).collect()
    }

    /// Mean mAP over seeds for one policy and stream; `None` if no seed
    /// produced a defined mAP.
    pub fn mean_map(&self, policy: PolicyKind, stream: &StreamSpec) -> Option<f64> {
        let maps: Vec<f64> = self
            .outcomes
            .iter()
            .filter(|o| o.key.policy == policy && o.key.stream == *stream)
            .filter_map(|o| o.result.as_ref().ok()?.record.map)
            .collect();
        (!maps.is_empty()).then(|| maps.iter().sum::<f64>() / maps.len() as f64)
    }
}

/// Cells in output order: stream entry, then policy, then seed.
pub fn cell_keys(config: &ExperimentConfig) -> Vec<CellKey> {
    let mut keys = Vec::new();
    for stream in &config.corruptions {
        for &policy in &config.policies {
            for &seed in &config.seeds {
                keys.push(CellKey { stream: *stream, policy, seed });
            }
        }
    }
    keys
}

fn clean_batches(images: Arc<Vec<Array3<f64>>>, batch_size: usize) -> impl Iterator<Item = Result<ImageBatch>> {
    let n = images.len();
    (0..n).step_by(batch_size).map(move |first| {
        let end = (first + batch_size).min(n);
        let views: Vec<ArrayView3<'_, f64>> = images[first..end].iter().map(|i| i.view()).collect();
        Ok(ImageBatch { first_index: first, images: to_batch(&views) })
    })
}

fn quintile_stats(run: &AdaptationRun, n_images: usize, eta: f64, gamma: f64) -> Vec<QuintileStats> {
    let q_of = |i: usize| (i * QUINTILES / n_images).min(QUINTILES - 1);
    let mut stats: Vec<QuintileStats> = (0..QUINTILES)
        .map(|q| QuintileStats {
            images: (q + 1) * n_images / QUINTILES - q * n_images / QUINTILES,
            detections: 0,
            above_gamma: 0,
            below_gamma: 0,
            mean_score: None,
            neg_score_mean: None,
        })
        .collect();
    let mut score_sum = [0.0; QUINTILES];
    for d in run.detections.iter().filter(|d| d.score >= eta) {
        let q = q_of(d.image_index);
        stats[q].detections += 1;
        score_sum[q] += d.score;
        if d.score >= gamma {
            stats[q].above_gamma += 1;
        } else {
            stats[q].below_gamma += 1;
        }
    }
    let mut neg = [(0.0, 0usize); QUINTILES];
    let mut start = 0;
    for r in &run.records {
        if let Some(v) = r.neg_score_mean {
            let q = q_of(start);
            neg[q].0 += v;
            neg[q].1 += 1;
        }
        start += r.n_images;
    }
    for (q, s) in stats.iter_mut().enumerate() {
        s.mean_score = (s.detections > 0).then(|| score_sum[q] / s.detections as f64);
        s.neg_score_mean = (neg[q].1 > 0).then(|| neg[q].0 / neg[q].1 as f64);
    }
    stats
}

/// One cell: fresh copy of `model`, one pass of the policy, AP on the
/// stream's detections.
pub fn run_cell(model: &ToyDetector, data: &EvalData, config: &ExperimentConfig, key: &CellKey) -> Result<CellResult> {
    let started = Instant::now();
    let tta = crate::tta::TtaConfig { seed: key.seed, ..config.tta.clone() };
    let mut model = model.clone();
    let subset = select_adaptable_parameters(&model)?;
    let frozen_before = subset.frozen_digest(&model);
    let mut policy = key.policy.build(&model, &tta)?;
    let run = match key.stream.corruption(key.seed) {
        Some(spec) => {
            let stream = in_memory_batches(data.images.clone(), spec, tta.batch_size)?;
            run_adaptation(&mut model, stream, policy.as_mut())?
        }
        None => run_adaptation(&mut model, clean_batches(data.images.clone(), tta.batch_size), policy.as_mut())?,
    };
    let frozen_unchanged = subset.frozen_digest(&model) == frozen_before;

    let classes = model.arch().classes;
    let evaluated = filter_by_score(&run.detections, config.score_threshold);
    let ap = average_precision_r40(&evaluated, &data.ground_truth, config.iou_threshold, classes)?;
    let alpha_trajectory = run.alpha_trajectory();
    let final_alpha = alpha_trajectory.last().copied().unwrap_or(tta.gamma);
    let histogram = score_histogram(&run.detections, config.histogram_bins, tta.eta, tta.gamma, final_alpha)?;
    let record = MetricsRecord {
        policy: key.policy,
        corruption: key.stream.kind.to_string(),
        severity: key.stream.severity,
        seed: key.seed,
        per_class_ap: ap.per_class,
        map: ap.map,
        num_images: data.len(),
        num_evaluated: evaluated.len(),
        alpha: AlphaSummary::of(&alpha_trajectory),
        quintiles: quintile_stats(&run, data.len(), tta.eta, tta.gamma),
        frozen_unchanged,
        wall_clock_s: started.elapsed().as_secs_f64(),
    };
    Ok(CellResult { record, alpha_trajectory, histogram, steps: run.records })
}

/// Runs every cell against an in-memory model and dataset; no file output.
pub fn run_cells(model: &ToyDetector, data: &EvalData, config: &ExperimentConfig) -> Result<Vec<CellOutcome>> {
    config.validate()?;
    let keys = cell_keys(config);
    let one = |key: &CellKey| {
        let result = run_cell(model, data, config, key).map_err(|e| e.to_string());
        if let Err(e) = &result {
            log::error!("cell {} / {} / seed {} failed: {e}", key.stream, key.policy, key.seed);
        }
        CellOutcome { key: *key, result }
    };
    Ok(if config.parallel { keys.par_iter().map(one).collect() } else { keys.iter().map(one).collect() })
}

/// Loads the checkpoint and data, runs every cell and writes all outputs to
/// `config.output_dir`. Cell failures are reported, not returned as errors.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let checkpoint = load_checkpoint(&config.checkpoint)?;
    let data = EvalData::load(&config.data, checkpoint.training.as_ref())?;
    let outcomes = run_cells(&checkpoint.model, &data, config)?;
    let report = ExperimentReport { outcomes, checkpoint_clean_map: checkpoint.training.as_ref().map(|t| t.clean_map) };
    write_outputs(&report, config, checkpoint.model.arch().classes, &config.output_dir)?;
    Ok(report)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn class_label(k: usize, classes: usize) -> String {
    if classes == CLASS_NAMES.len() {
        CLASS_NAMES[k].to_string()
    } else {
        format!("class{k}")
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Output files (every CSV is a pure function of config and checkpoint):
///
/// * `cells.csv`: one row per cell with per-class AP, mAP, alpha summary and
///   first/last quintile counts; failed cells carry their error.
/// * `comparison.csv` / `comparison.txt`: streams x policies mean mAP with
///   gains relative to `source_only`.
/// * `alpha_trajectories.csv`: `policy,corruption,severity,seed,step,alpha`.
/// * `score_histograms.csv`: `policy,corruption,severity,seed,bin_low,bin_high,count`.
/// * `metrics.jsonl`: full [`MetricsRecord`]s, including wall-clock time.
/// * `steps.jsonl`: one [`StepRecord`] per batch, tagged with its cell.
/// * `config.toml`: the resolved configuration.
pub fn write_outputs(report: &ExperimentReport, config: &ExperimentConfig, classes: usize, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut cells = String::from("policy,corruption,severity,seed,status,map");
    for k in 0..classes {
        write!(cells, ",ap_{}", class_label(k, classes)).unwrap();
    }
    cells.push_str(",evaluated,alpha_first,alpha_last,alpha_mean,first_above_gamma,last_above_gamma,first_mean_score,last_mean_score,first_neg_score,last_neg_score,frozen_unchanged,error\n");
    let mut alpha_csv = String::from("policy,corruption,severity,seed,step,alpha\n");
    let mut hist_csv = String::from("policy,corruption,severity,seed,bin_low,bin_high,count\n");
    let mut jsonl = String::new();
    let mut steps = String::new();
    for o in &report.outcomes {
        let k = &o.key;
        let prefix = format!(
            "{},{},{},{}",
            k.policy,
            k.stream.kind,
            k.stream.severity.map(|s| s.to_string()).unwrap_or_default(),
            k.seed
        );
        match &o.result {
            Ok(r) => {
                let m = &r.record;
                write!(cells, "{prefix},ok,{}", opt(m.map)).unwrap();
                for ap in &m.per_class_ap {
                    write!(cells, ",{}", opt(*ap)).unwrap();
                }
                let (first, last) = (&m.quintiles[0], &m.quintiles[QUINTILES - 1]);
                let a = m.alpha.as_ref();
                writeln!(
                    cells,
                    ",{},{},{},{},{},{},{},{},{},{},{},",
                    m.num_evaluated,
                    opt(a.map(|a| a.first)),
                    opt(a.map(|a| a.last)),
                    opt(a.map(|a| a.mean)),
                    first.above_gamma,
                    last.above_gamma,
                    opt(first.mean_score),
                    opt(last.mean_score),
                    opt(first.neg_score_mean),
                    opt(last.neg_score_mean),
                    m.frozen_unchanged
                )
                .unwrap();
                for (step, alpha) in r.alpha_trajectory.iter().enumerate() {
                    writeln!(alpha_csv, "{prefix},{},{alpha}", step + 1).unwrap();
                }
                for (i, count) in r.histogram.counts.iter().enumerate() {
                    writeln!(hist_csv, "{prefix},{},{},{count}", r.histogram.edges[i], r.histogram.edges[i + 1])
                        .unwrap();
                }
                for record in &r.steps {
                    let line = StepLine {
                        corruption: k.stream.kind.to_string(),
                        severity: k.stream.severity,
                        seed: k.seed,
                        record,
                    };
                    steps.push_str(&serde_json::to_string(&line)?);
                    steps.push('\n');
                }
                jsonl.push_str(&serde_json::to_string(m)?);
                jsonl.push('\n');
            }
            Err(e) => {
                write!(cells, "{prefix},failed,").unwrap();
                cells.push_str(&",".repeat(classes + 11));
                writeln!(cells, ",\"{}\"", e.replace('"', "'")).unwrap();
            }
        }
    }
    write_file(&dir.join("cells.csv"), &cells)?;
    write_file(&dir.join("alpha_trajectories.csv"), &alpha_csv)?;
    write_file(&dir.join("score_histograms.csv"), &hist_csv)?;
    write_file(&dir.join("metrics.jsonl"), &jsonl)?;
    write_file(&dir.join("steps.jsonl"), &steps)?;
    let rendered = render_report(&report.records().into_iter().cloned().collect::<Vec<_>>());
    write_file(&dir.join("comparison.csv"), &rendered.csv)?;
    write_file(&dir.join("comparison.txt"), &rendered.text)?;
    config.save(&dir.join("config.toml"))?;
    Ok(())
}

//! Experiment configuration, stored as TOML.
//!
//! ```toml
//! checkpoint = "toy.ckpt"
//! output_dir = "runs/gaussian"
//! policies = ["source_only", "bn_adapt", "monotta"]
//! seeds = [0, 1, 2]
//!
//! [data]
//! source = "validation"        # or "generated" (n, seed) or "directory" (path)
//!
//! [[corruptions]]
//! kind = "gaussian_noise"
//! severity = 3
//!
//! [[corruptions]]
//! kind = "clean"
//!
//! [tta]                        # any TtaConfig field; omitted ones keep defaults
//! learning_rate = 0.0005
//! ```
//!
//! Relative paths resolve against the config file's directory, except that
//! a relative `output_dir` resolves against `$MONOTTA_OUTPUT_ROOT` when set.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::PolicyKind;
use crate::corruption::{CorruptionKind, CorruptionSpec};
use crate::error::{Error, Result};
use crate::tta::TtaConfig;

pub const OUTPUT_ROOT_ENV: &str = "MONOTTA_OUTPUT_ROOT";

/// Where the labeled evaluation images come from.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// The validation split recorded in the checkpoint's training config.
    #[default]
    Validation,
    Generated {
        n: usize,
        seed: u64,
    },
    /// A labeled image directory (PNG/JPEG plus `labels.csv`).
    Directory {
        path: PathBuf,
    },
}

/// A corruption kind, or `clean` for the unmodified images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct StreamKind(pub Option<CorruptionKind>);

impl StreamKind {
    pub const CLEAN: StreamKind = StreamKind(None);
}

impl fmt::Display for StreamKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Some(k) => f.write_str(k.name()),
            None => f.write_str("clean"),
        }
    }
}

impl FromStr for StreamKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "clean" {
            Ok(Self::CLEAN)
        } else {
            Ok(Self(Some(s.parse()?)))
        }
    }
}

impl TryFrom<String> for StreamKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<StreamKind> for String {
    fn from(k: StreamKind) -> String {
        k.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSpec {
    pub kind: StreamKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub severity: Option<u8>,
}

impl StreamSpec {
    pub fn clean() -> Self {
        Self { kind: StreamKind::CLEAN, severity: None }
    }

    pub fn corrupted(kind: CorruptionKind, severity: u8) -> Self {
        Self { kind: StreamKind(Some(kind)), severity: Some(severity) }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.kind.0, self.severity) {
            (None, None) => Ok(()),
            (None, Some(_)) => Err(Error::Config("the clean stream takes no severity".into())),
            (Some(k), None) => Err(Error::Config(format!("{k} needs a severity in 1..=5"))),
            (Some(k), Some(s)) => {
                CorruptionSpec::new(k, s, 0).map(|_| ()).map_err(|e| Error::Config(format!("{k}: {e}")))
            }
        }
    }

    /// The corruption to apply for one seed; `None` for the clean stream.
    pub fn corruption(&self, seed: u64) -> Option<CorruptionSpec> {
        match (self.kind.0, self.severity) {
            (Some(kind), Some(severity)) => Some(CorruptionSpec { kind, severity, seed }),
            _ => None,
        }
    }
}

impl fmt::Display for StreamSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.severity {
            Some(s) => write!(f, "{}@{s}", self.kind),
            None => write!(f, "{}", self.kind),
        }
    }
}

fn default_score_threshold() -> f64 {
    0.2
}

fn default_iou_threshold() -> f64 {
    0.5
}

fn default_histogram_bins() -> usize {
    20
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub checkpoint: PathBuf,
    pub output_dir: PathBuf,
    pub policies: Vec<PolicyKind>,
    pub seeds: Vec<u64>,
    /// Detections scoring below this are discarded before AP evaluation.
    #[serde(default = "default_score_threshold")]
    pub score_threshold: f64,
    #[serde(default = "default_iou_threshold")]
    pub iou_threshold: f64,
    #[serde(default = "default_histogram_bins")]
    pub histogram_bins: usize,
    /// Run cells on the rayon pool; results never depend on this.
    #[serde(default = "default_true")]
    pub parallel: bool,
    #[serde(default)]
    pub data: DataSource,
    pub corruptions: Vec<StreamSpec>,
    #[serde(default)]
    pub tta: TtaConfig,
}

impl ExperimentConfig {
    pub fn new(checkpoint: impl Into<PathBuf>, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            checkpoint: checkpoint.into(),
            output_dir: output_dir.into(),
            policies: vec![PolicyKind::SourceOnly, PolicyKind::BnAdapt, PolicyKind::Monotta],
            seeds: vec![0],
            score_threshold: default_score_threshold(),
            iou_threshold: default_iou_threshold(),
            histogram_bins: default_histogram_bins(),
            parallel: true,
            data: DataSource::Validation,
            corruptions: vec![StreamSpec::corrupted(CorruptionKind::GaussianNoise, 3)],
            tta: TtaConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.policies.is_empty() {
            return Err(Error::Config("at least one policy is required".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.corruptions.is_empty() {
            return Err(Error::Config("at least one corruption entry is required".into()));
        }
        for c in &self.corruptions {
            c.validate()?;
        }
        if !(self.score_threshold >= 0.0 && self.score_threshold < 1.0) {
            return Err(Error::Config(format!("score_threshold {} outside [0, 1)", self.score_threshold)));
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            return Err(Error::Config(format!("iou_threshold {} outside (0, 1)", self.iou_threshold)));
        }
        if self.histogram_bins < 2 {
            return Err(Error::Config("histogram_bins must be at least 2".into()));
        }
        if let DataSource::Generated { n: 0, .. } = self.data {
            return Err(Error::Config("generated data needs n >= 1".into()));
        }
        self.tta.validate()
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads, validates and resolves relative paths (see module docs).
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base, std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).as_deref());
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path, output_root: Option<&Path>) {
        let join = |p: &Path, root: &Path| if p.is_absolute() { p.to_path_buf() } else { root.join(p) };
        self.checkpoint = join(&self.checkpoint, base);
        if let DataSource::Directory { path } = &mut self.data {
            *path = join(path, base);
        }
        self.output_dir = join(&self.output_dir, output_root.unwrap_or(base));
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml_string()?).map_err(|e| Error::io(path, e))
    }
}

//! Run configuration and the JSON-lines run log.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::trainer::{EpochRecord, TrainConfig};
use crate::attention::EncoderConfig;
use crate::data::labels_io::read_json;
use crate::error::{Error, Result};
use crate::metrics::TypeScores;
use crate::objectives::ObjectiveConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Synth,
    Pretrain,
    PseudoLabel,
    Train,
    Eval,
    Gradcheck,
}

/// Width settings of the inference model; input widths come from the data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelDims {
    pub hidden: usize,
    pub heads: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self { hidden: 64, heads: 4 }
    }
}

/// Everything a stage needs. Missing keys take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub stage: Stage,
    pub seed: u64,
    /// Supervised manifest for pre-training.
    pub supervised_manifest: Option<PathBuf>,
    /// Weakly-labeled training manifest.
    pub manifest: Option<PathBuf>,
    pub eval_manifest: Option<PathBuf>,
    pub eval_ground_truth: Option<PathBuf>,
    pub pseudo_labels: Option<PathBuf>,
    /// Checkpoint directory to load (pseudo-labeling, evaluation).
    pub checkpoint: Option<PathBuf>,
    /// Checkpoint directory to resume training from.
    pub resume: Option<PathBuf>,
    pub pretrain: TrainConfig,
    pub train: TrainConfig,
    pub encoder: EncoderConfig,
    pub model: ModelDims,
    pub objective: ObjectiveConfig,
    /// Quantile for threshold calibration.
    pub quantile: f64,
    /// Probability threshold for segment predictions.
    pub tau: f64,
    pub iou_threshold: f64,
    /// Epoch checkpoint directories kept on disk (0 keeps all).
    pub keep_checkpoints: usize,
    /// Keep the epoch with the best held-out Type score in `best/`.
    pub select_best: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Train,
            seed: 0,
            supervised_manifest: None,
            manifest: None,
            eval_manifest: None,
            eval_ground_truth: None,
            pseudo_labels: None,
            checkpoint: None,
            resume: None,
            pretrain: TrainConfig::pseudo_labeler(),
            train: TrainConfig::inference(),
            encoder: EncoderConfig::default(),
            model: ModelDims::default(),
            objective: ObjectiveConfig::default(),
            quantile: 0.5,
            tau: 0.5,
            iou_threshold: 0.5,
            keep_checkpoints: 2,
            select_best: false,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        self.pretrain.validate()?;
        self.train.validate()?;
        self.encoder.validate()?;
        self.objective.validate()?;
        if !(0.0..=1.0).contains(&self.quantile) {
            return Err(Error::Config(format!("quantile {} outside [0, 1]", self.quantile)));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau {} outside [0, 1]", self.tau)));
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::Config(format!("IoU threshold {} outside (0, 1]", self.iou_threshold)));
        }
        for p in [
            &self.supervised_manifest,
            &self.manifest,
            &self.eval_manifest,
            &self.eval_ground_truth,
            &self.pseudo_labels,
            &self.checkpoint,
            &self.resume,
        ]
        .into_iter()
        .flatten()
        {
            if !p.exists() {
                return Err(Error::Missing(p.clone()));
            }
        }
        Ok(())
    }
}

/// Per-epoch entry of the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub stage: Stage,
    #[serde(flatten)]
    pub epoch: EpochRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<TypeScores>,
}

/// One line of the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LogLine {
    /// The merged effective configuration, written first.
    Config { stage: Stage, config: Box<RunConfig> },
    Epoch(LogRecord),
    /// Where the final artifact of the stage went.
    Final { stage: Stage, artifact: PathBuf },
}

/// Append-only JSON-lines log.
pub struct RunLog {
    path: PathBuf,
    file: File,
}

impl RunLog {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn append(&mut self, line: &LogLine) -> Result<()> {
        let text = serde_json::to_string(line).map_err(|e| Error::json(&self.path, e))?;
        writeln!(self.file, "{text}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn read(path: &Path) -> Result<Vec<LogLine>> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::json(path, e)))
            .collect()
    }

    /// Epoch entries only, in file order.
    pub fn epochs(path: &Path) -> Result<Vec<LogRecord>> {
        Ok(Self::read(path)?
            .into_iter()
            .filter_map(|l| match l {
                LogLine::Epoch(r) => Some(r),
                _ => None,
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_json() {
        let cfg = RunConfig::default();
        let back: RunConfig = serde_json::from_str(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        let partial: RunConfig = serde_json::from_str(r#"{"seed": 7, "objective": {"alpha": 2.0}}"#).unwrap();
        assert_eq!(partial.seed, 7);
        assert_eq!(partial.objective.mixup_config.alpha, 2.0);
        assert_eq!(partial.objective.class_weight_w, 0.5);
        assert_eq!(partial.train.batch_size, 64);
    }

    #[test]
    fn validation_catches_missing_paths_and_ranges() {
        let cfg = RunConfig {
            manifest: Some("/nonexistent/manifest.json".into()),
            ..RunConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Missing(_))));
        let cfg = RunConfig {
            quantile: 1.5,
            ..RunConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn log_lines_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        let mut log = RunLog::create(&path).unwrap();
        let cfg = RunConfig::default();
        log.append(&LogLine::Config { stage: Stage::Train, config: Box::new(cfg.clone()) }).unwrap();
        let rec = LogRecord {
            stage: Stage::Train,
            epoch: EpochRecord {
                epoch: 0,
                lr: 1e-5,
                losses: [("total".to_string(), 1.5)].into_iter().collect(),
                grad_norm: 0.3,
                wall_time_s: 0.1,
            },
            eval: None,
        };
        log.append(&LogLine::Epoch(rec.clone())).unwrap();
        let lines = RunLog::read(&path).unwrap();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], LogLine::Config { stage: Stage::Train, config: Box::new(cfg) });
        assert_eq!(RunLog::epochs(&path).unwrap(), vec![rec]);
    }
}

//! JSON files for pseudo-labels, prediction dumps and held-out ground truth.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{check_grid, BinaryGrid, Dataset, PseudoLabelSet, SoftGrid};
use crate::error::{Error, Result};

pub const PSEUDO_FORMAT: &str = "uwav-pseudo-labels/1";
pub const GT_FORMAT: &str = "uwav-ground-truth/1";

/// How a threshold vector was obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationMeta {
    pub method: String,
    pub quantile: f64,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoPseudoLabels {
    pub binary_visual: BinaryGrid,
    pub binary_audio: BinaryGrid,
    pub soft_visual: SoftGrid,
    pub soft_audio: SoftGrid,
}

/// Pseudo-labels (or model predictions) for a whole dataset. Thresholds are
/// shared by all videos; `null` encodes +inf (a class that is never
/// positive).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelFile {
    pub format: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration: Option<CalibrationMeta>,
    pub thresholds_visual: Vec<Option<f64>>,
    pub thresholds_audio: Vec<Option<f64>>,
    pub videos: BTreeMap<String, VideoPseudoLabels>,
}

pub(crate) fn encode_thresholds(th: &[f64]) -> Vec<Option<f64>> {
    th.iter().map(|&v| v.is_finite().then_some(v)).collect()
}

fn decode_thresholds(th: &[Option<f64>]) -> Vec<f64> {
    th.iter().map(|v| v.unwrap_or(f64::INFINITY)).collect()
}

impl PseudoLabelFile {
    pub fn new(thresholds_visual: &[f64], thresholds_audio: &[f64], calibration: Option<CalibrationMeta>) -> Self {
        Self {
            format: PSEUDO_FORMAT.to_string(),
            calibration,
            thresholds_visual: encode_thresholds(thresholds_visual),
            thresholds_audio: encode_thresholds(thresholds_audio),
            videos: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, video_id: &str, set: &PseudoLabelSet) {
        self.videos.insert(
            video_id.to_string(),
            VideoPseudoLabels {
                binary_visual: set.binary_visual.clone(),
                binary_audio: set.binary_audio.clone(),
                soft_visual: set.soft_visual.clone(),
                soft_audio: set.soft_audio.clone(),
            },
        );
    }

    pub fn get(&self, video_id: &str) -> Option<PseudoLabelSet> {
        self.videos.get(video_id).map(|v| PseudoLabelSet {
            binary_visual: v.binary_visual.clone(),
            binary_audio: v.binary_audio.clone(),
            soft_visual: v.soft_visual.clone(),
            soft_audio: v.soft_audio.clone(),
            thresholds_visual: decode_thresholds(&self.thresholds_visual),
            thresholds_audio: decode_thresholds(&self.thresholds_audio),
        })
    }

    pub fn thresholds(&self) -> (Vec<f64>, Vec<f64>) {
        (decode_thresholds(&self.thresholds_visual), decode_thresholds(&self.thresholds_audio))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::Missing(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub fn write_pseudo_labels(path: &Path, file: &PseudoLabelFile) -> Result<()> {
    write_json(path, file)
}

fn check_against(file: &PseudoLabelFile, dataset: &Dataset, strict: bool) -> Result<()> {
    if file.format != PSEUDO_FORMAT {
        return Err(Error::Config(format!("unsupported pseudo-label format {:?}", file.format)));
    }
    let (t, c) = (dataset.segments, dataset.num_classes());
    if file.thresholds_visual.len() != c || file.thresholds_audio.len() != c {
        return Err(Error::Config(format!("threshold vectors do not have {c} entries")));
    }
    for video in &dataset.videos {
        let id = video.id();
        let entry = file.videos.get(id).ok_or_else(|| Error::validation(id, "no pseudo-labels for this video"))?;
        check_grid(id, "binary_visual", &entry.binary_visual, t, c)?;
        check_grid(id, "binary_audio", &entry.binary_audio, t, c)?;
        check_grid(id, "soft_visual", &entry.soft_visual, t, c)?;
        check_grid(id, "soft_audio", &entry.soft_audio, t, c)?;
        if strict {
            file.get(id).expect("present").validate(id, &video.labels.video_labels)?;
        }
    }
    if let Some(extra) = file.videos.keys().find(|k| dataset.video(k).is_none()) {
        return Err(Error::validation(extra.as_str(), "pseudo-labels name a video missing from the manifest"));
    }
    Ok(())
}

/// Reads pseudo-labels and validates them against the dataset: every video
/// present, shapes `T x C`, masking and binary/soft agreement.
pub fn read_pseudo_labels(path: &Path, dataset: &Dataset) -> Result<PseudoLabelFile> {
    let file: PseudoLabelFile = read_json(path)?;
    check_against(&file, dataset, true)?;
    Ok(file)
}

/// Reads a prediction dump (same schema as pseudo-labels); only shapes and
/// coverage are checked, since predictions are not masked by video labels.
pub fn read_prediction_dump(path: &Path, dataset: &Dataset) -> Result<PseudoLabelFile> {
    let file: PseudoLabelFile = read_json(path)?;
    check_against(&file, dataset, false)?;
    Ok(file)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoGroundTruth {
    pub segment_visual: BinaryGrid,
    pub segment_audio: BinaryGrid,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segment_single: Option<Vec<Option<usize>>>,
}

/// Held-out segment-level ground truth, kept out of the manifest so the
/// weakly-supervised training path cannot read it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthFile {
    pub format: String,
    pub videos: BTreeMap<String, VideoGroundTruth>,
}

impl Default for GroundTruthFile {
    fn default() -> Self {
        Self {
            format: GT_FORMAT.to_string(),
            videos: BTreeMap::new(),
        }
    }
}

pub fn write_ground_truth(path: &Path, gt: &GroundTruthFile) -> Result<()> {
    write_json(path, gt)
}

pub fn read_ground_truth(path: &Path) -> Result<GroundTruthFile> {
    let gt: GroundTruthFile = read_json(path)?;
    if gt.format != GT_FORMAT {
        return Err(Error::Config(format!("unsupported ground-truth format {:?}", gt.format)));
    }
    Ok(gt)
}

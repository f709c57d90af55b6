//! Dataset schema: vocabulary, per-video features, label sets and
//! pseudo-label sets, plus their on-disk formats and the synthetic
//! generator.

pub(crate) mod labels_io;
mod manifest;
mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::io::RawTensor;

pub use labels_io::{
    read_ground_truth, read_prediction_dump, read_pseudo_labels, write_ground_truth,
    write_pseudo_labels, CalibrationMeta, GroundTruthFile, PseudoLabelFile, VideoGroundTruth, VideoPseudoLabels,
};
pub use manifest::{load_manifest, write_manifest, Manifest, ManifestVideo, FeaturePaths, TextEmbeddingPaths};
pub use synth::{synth_dataset, SynthConfig, SynthOutput};

/// Per-segment, per-class binary matrix (`T x C`).
pub type BinaryGrid = Vec<Vec<u8>>;
/// Per-segment, per-class real matrix (`T x C`).
pub type SoftGrid = Vec<Vec<f64>>;

pub const VISUAL_TEMPLATE: &str = "A photo of <EVENT NAME>";
pub const AUDIO_TEMPLATE: &str = "This is the sound of <EVENT NAME>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetMode {
    /// Segment-level audio-visual labels available (pre-training).
    Supervised,
    /// Video-level labels only (target training).
    Weak,
    /// One audio-visual event per video, background elsewhere.
    Ave,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventVocabulary {
    pub class_names: Vec<String>,
    #[serde(default = "default_visual_template")]
    pub visual_template: String,
    #[serde(default = "default_audio_template")]
    pub audio_template: String,
}

fn default_visual_template() -> String {
    VISUAL_TEMPLATE.to_string()
}

fn default_audio_template() -> String {
    AUDIO_TEMPLATE.to_string()
}

impl EventVocabulary {
    pub fn new(class_names: Vec<String>) -> Result<Self> {
        let v = Self {
            class_names,
            visual_template: default_visual_template(),
            audio_template: default_audio_template(),
        };
        v.validate()?;
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.class_names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_names.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_names.is_empty() {
            return Err(Error::Config("vocabulary has no classes".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for name in &self.class_names {
            if name.trim().is_empty() {
                return Err(Error::Config("empty class name in vocabulary".into()));
            }
            if !seen.insert(name) {
                return Err(Error::Config(format!("duplicate class name {name:?}")));
            }
        }
        Ok(())
    }

    pub fn visual_caption(&self, class: usize) -> String {
        self.visual_template.replace("<EVENT NAME>", &self.class_names[class])
    }

    pub fn audio_caption(&self, class: usize) -> String {
        self.audio_template.replace("<EVENT NAME>", &self.class_names[class])
    }
}

/// Segment features of one video in both modalities.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub video_id: String,
    /// `T x d_v` backbone features feeding the inference model.
    pub visual_backbone: RawTensor,
    /// `T x d_a`.
    pub audio_backbone: RawTensor,
    /// `T x d1` features in the visual text-embedding space.
    pub visual_embed: RawTensor,
    /// `T x d2` features in the audio text-embedding space.
    pub audio_embed: RawTensor,
}

impl FeatureBundle {
    pub fn segments(&self) -> usize {
        self.visual_backbone.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.segments();
        for (name, m) in self.streams() {
            if m.shape.len() != 2 {
                return Err(Error::validation(&self.video_id, format!("{name} is not a matrix")));
            }
            if m.rows() != t {
                return Err(Error::validation(
                    &self.video_id,
                    format!("{name} has {} segments, expected {t}", m.rows()),
                ));
            }
            if m.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::validation(&self.video_id, format!("{name} has non-finite values")));
            }
        }
        Ok(())
    }

    pub fn streams(&self) -> [(&'static str, &RawTensor); 4] {
        [
            ("visual_backbone", &self.visual_backbone),
            ("audio_backbone", &self.audio_backbone),
            ("visual_embed", &self.visual_embed),
            ("audio_embed", &self.audio_embed),
        ]
    }
}

/// Per-class text event embeddings (`C x d1` and `C x d2`).
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbeddings {
    pub visual_text: RawTensor,
    pub audio_text: RawTensor,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabelSet {
    /// Length-C video-level label.
    pub video_labels: Vec<u8>,
    pub segment_visual: Option<BinaryGrid>,
    pub segment_audio: Option<BinaryGrid>,
    pub segment_av_supervised: Option<BinaryGrid>,
    /// Single class (or `None` for background) per segment, AVE-style data.
    pub segment_single: Option<Vec<Option<usize>>>,
}

impl LabelSet {
    pub fn from_indices(classes: &[usize], num_classes: usize) -> Result<Vec<u8>> {
        let mut y = vec![0u8; num_classes];
        for &c in classes {
            if c >= num_classes {
                return Err(Error::Config(format!("class index {c} out of range for {num_classes} classes")));
            }
            y[c] = 1;
        }
        Ok(y)
    }

    /// Checks shapes and the label-consistency invariants.
    pub fn validate(&self, video: &str, segments: usize, num_classes: usize) -> Result<()> {
        if self.video_labels.len() != num_classes {
            return Err(Error::validation(video, format!("video label has {} classes, expected {num_classes}", self.video_labels.len())));
        }
        if self.video_labels.iter().any(|&v| v > 1) {
            return Err(Error::validation(video, "video label is not binary"));
        }
        let grids = [
            ("segment_visual", &self.segment_visual),
            ("segment_audio", &self.segment_audio),
            ("segment_av_supervised", &self.segment_av_supervised),
        ];
        for (name, grid) in grids {
            let Some(grid) = grid else { continue };
            check_grid(video, name, grid, segments, num_classes)?;
            for (t, row) in grid.iter().enumerate() {
                for (c, &v) in row.iter().enumerate() {
                    if v == 1 && self.video_labels[c] == 0 {
                        return Err(Error::validation(
                            video,
                            format!("{name} marks class {c} at segment {t} but the video label omits it"),
                        ));
                    }
                }
            }
        }
        if let (Some(v), Some(a), Some(av)) = (&self.segment_visual, &self.segment_audio, &self.segment_av_supervised) {
            for t in 0..segments {
                for c in 0..num_classes {
                    if av[t][c] != (v[t][c] & a[t][c]) {
                        return Err(Error::validation(
                            video,
                            format!("audio-visual label at segment {t} class {c} is not the conjunction of the modality labels"),
                        ));
                    }
                }
            }
        }
        if let Some(single) = &self.segment_single {
            if single.len() != segments {
                return Err(Error::validation(video, format!("single-label track has {} segments, expected {segments}", single.len())));
            }
            for (t, s) in single.iter().enumerate() {
                if let Some(c) = *s {
                    if c >= num_classes || self.video_labels[c] == 0 {
                        return Err(Error::validation(video, format!("single label {c} at segment {t} inconsistent with video label")));
                    }
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn check_grid<T>(video: &str, name: &str, grid: &[Vec<T>], rows: usize, cols: usize) -> Result<()> {
    if grid.len() != rows || grid.iter().any(|r| r.len() != cols) {
        return Err(Error::validation(video, format!("{name} is not {rows}x{cols}")));
    }
    Ok(())
}

/// Binary and uncertainty-weighted pseudo-labels for one video.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelSet {
    pub binary_visual: BinaryGrid,
    pub binary_audio: BinaryGrid,
    pub soft_visual: SoftGrid,
    pub soft_audio: SoftGrid,
    pub thresholds_visual: Vec<f64>,
    pub thresholds_audio: Vec<f64>,
}

impl PseudoLabelSet {
    /// Checks the masking and binary/soft agreement invariants against the
    /// video-level label.
    pub fn validate(&self, video: &str, video_labels: &[u8]) -> Result<()> {
        let (t, c) = (self.binary_visual.len(), video_labels.len());
        check_grid(video, "binary_visual", &self.binary_visual, t, c)?;
        check_grid(video, "binary_audio", &self.binary_audio, t, c)?;
        check_grid(video, "soft_visual", &self.soft_visual, t, c)?;
        check_grid(video, "soft_audio", &self.soft_audio, t, c)?;
        if self.thresholds_visual.len() != c || self.thresholds_audio.len() != c {
            return Err(Error::validation(video, "threshold vector length differs from class count"));
        }
        let pairs = [
            ("visual", &self.binary_visual, &self.soft_visual),
            ("audio", &self.binary_audio, &self.soft_audio),
        ];
        for (name, binary, soft) in pairs {
            for s in 0..t {
                for k in 0..c {
                    let (b, p) = (binary[s][k], soft[s][k]);
                    if !(0.0..=1.0).contains(&p) {
                        return Err(Error::validation(video, format!("{name} soft value {p} outside [0, 1]")));
                    }
                    if b > 1 {
                        return Err(Error::validation(video, format!("{name} binary value {b} is not 0/1")));
                    }
                    if video_labels[k] == 0 && (p != 0.0 || b != 0) {
                        return Err(Error::validation(
                            video,
                            format!("{name} pseudo-label for class {k} at segment {s} is nonzero but the video label is 0"),
                        ));
                    }
                    if video_labels[k] == 1 && ((b == 1) != (p > 0.5)) {
                        return Err(Error::validation(
                            video,
                            format!("{name} binary {b} disagrees with soft {p} at segment {s} class {k}"),
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

/// One loaded video: features plus labels.
#[derive(Debug, Clone)]
pub struct VideoRecord {
    pub features: FeatureBundle,
    pub labels: LabelSet,
}

impl VideoRecord {
    pub fn id(&self) -> &str {
        &self.features.video_id
    }
}

/// A validated dataset held in memory, read-only after loading.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub mode: DatasetMode,
    pub segments: usize,
    pub vocab: EventVocabulary,
    pub text: TextEmbeddings,
    pub videos: Vec<VideoRecord>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.vocab.len()
    }

    pub fn video(&self, id: &str) -> Option<&VideoRecord> {
        self.videos.iter().find(|v| v.id() == id)
    }

    /// Widths `(d_v, d_a, d1, d2)`.
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let f = &self.videos[0].features;
        (
            f.visual_backbone.cols(),
            f.audio_backbone.cols(),
            f.visual_embed.cols(),
            f.audio_embed.cols(),
        )
    }

    /// Merges a held-out ground-truth sidecar into the label sets.
    pub fn attach_ground_truth(&mut self, gt: &GroundTruthFile) -> Result<()> {
        let (t, c) = (self.segments, self.num_classes());
        for video in &mut self.videos {
            let id = video.features.video_id.clone();
            let entry = gt
                .videos
                .get(&id)
                .ok_or_else(|| Error::validation(&id, "no ground truth in sidecar"))?;
            video.labels.segment_visual = Some(entry.segment_visual.clone());
            video.labels.segment_audio = Some(entry.segment_audio.clone());
            if entry.segment_single.is_some() {
                video.labels.segment_single = entry.segment_single.clone();
            }
            video.labels.validate(&id, t, c)?;
        }
        Ok(())
    }

    pub fn has_ground_truth(&self) -> bool {
        self.videos
            .iter()
            .all(|v| v.labels.segment_visual.is_some() && v.labels.segment_audio.is_some())
    }
}

//! Manifest JSON: the entry point of every dataset on disk.
//!
//! ```json
//! {
//!   "format": "uwav-manifest/1",
//!   "mode": "weak",
//!   "segments": 10,
//!   "vocabulary": { "class_names": ["dog", "car"] },
//!   "text_embeddings": { "visual": "text_visual.uwt", "audio": "text_audio.uwt" },
//!   "videos": [
//!     {
//!       "video_id": "train_00000",
//!       "features": {
//!         "visual_backbone": "features/train_00000.vb.uwt",
//!         "audio_backbone": "features/train_00000.ab.uwt",
//!         "visual_embed": "features/train_00000.ve.uwt",
//!         "audio_embed": "features/train_00000.ae.uwt"
//!       },
//!       "video_labels": [0, 1],
//!       "segment_av_supervised": [[0], [0, 1], [], ...]
//!     }
//!   ]
//! }
//! ```
//!
//! Paths are relative to the manifest's directory. Segment label tracks are
//! optional and list, for each segment, the active class indices.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    BinaryGrid, Dataset, DatasetMode, EventVocabulary, FeatureBundle, LabelSet, TextEmbeddings, VideoRecord,
};
use crate::error::{Error, Result};
use crate::tensor::io::{read_tensor, RawTensor};

pub const MANIFEST_FORMAT: &str = "uwav-manifest/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEmbeddingPaths {
    pub visual: PathBuf,
    pub audio: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturePaths {
    pub visual_backbone: PathBuf,
    pub audio_backbone: PathBuf,
    pub visual_embed: PathBuf,
    pub audio_embed: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestVideo {
    pub video_id: String,
    pub features: FeaturePaths,
    pub video_labels: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segment_visual: Option<Vec<Vec<usize>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segment_audio: Option<Vec<Vec<usize>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segment_av_supervised: Option<Vec<Vec<usize>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub mode: DatasetMode,
    pub segments: usize,
    pub vocabulary: EventVocabulary,
    pub text_embeddings: TextEmbeddingPaths,
    pub videos: Vec<ManifestVideo>,
}

fn indices_to_grid(video: &str, name: &str, track: &[Vec<usize>], t: usize, c: usize) -> Result<BinaryGrid> {
    if track.len() != t {
        return Err(Error::validation(video, format!("{name} has {} segments, expected {t}", track.len())));
    }
    let mut grid = vec![vec![0u8; c]; t];
    for (s, classes) in track.iter().enumerate() {
        for &k in classes {
            if k >= c {
                return Err(Error::validation(video, format!("{name} segment {s} names class {k} outside vocabulary of {c}")));
            }
            grid[s][k] = 1;
        }
    }
    Ok(grid)
}

pub(crate) fn grid_to_indices(grid: &BinaryGrid) -> Vec<Vec<usize>> {
    grid.iter()
        .map(|row| row.iter().enumerate().filter(|(_, &v)| v == 1).map(|(k, _)| k).collect())
        .collect()
}

fn read_matrix(root: &Path, rel: &Path, video: &str, what: &str) -> Result<RawTensor> {
    let path = root.join(rel);
    if !path.exists() {
        return Err(Error::validation(video, format!("{what} file {} is missing", path.display())));
    }
    let m = read_tensor(&path)?;
    if m.shape.len() != 2 {
        return Err(Error::validation(video, format!("{what} in {} is rank {}, expected 2", path.display(), m.shape.len())));
    }
    Ok(m)
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest).map_err(|e| Error::json(path, e))?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Reads a manifest and every file it references, validating shapes and
/// label consistency.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::Missing(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(Error::Config(format!("unsupported manifest format {:?}", manifest.format)));
    }
    manifest.vocabulary.validate()?;
    let root = path.parent().unwrap_or(Path::new("."));
    let t = manifest.segments;
    let c = manifest.vocabulary.len();
    if t == 0 {
        return Err(Error::Config("manifest declares zero segments".into()));
    }
    if manifest.videos.is_empty() {
        return Err(Error::Config("manifest lists no videos".into()));
    }

    let text_emb = TextEmbeddings {
        visual_text: read_matrix(root, &manifest.text_embeddings.visual, "<text>", "visual text embeddings")?,
        audio_text: read_matrix(root, &manifest.text_embeddings.audio, "<text>", "audio text embeddings")?,
    };
    for (name, m) in [("visual", &text_emb.visual_text), ("audio", &text_emb.audio_text)] {
        if m.rows() != c {
            return Err(Error::validation("<text>", format!("{name} text embeddings have {} rows for {c} classes", m.rows())));
        }
    }

    let mut videos = Vec::with_capacity(manifest.videos.len());
    let mut seen = std::collections::HashSet::new();
    let mut widths: Option<[usize; 4]> = None;
    for entry in &manifest.videos {
        let id = entry.video_id.as_str();
        if !seen.insert(id) {
            return Err(Error::validation(id, "duplicate video id"));
        }
        let features = FeatureBundle {
            video_id: id.to_string(),
            visual_backbone: read_matrix(root, &entry.features.visual_backbone, id, "visual_backbone")?,
            audio_backbone: read_matrix(root, &entry.features.audio_backbone, id, "audio_backbone")?,
            visual_embed: read_matrix(root, &entry.features.visual_embed, id, "visual_embed")?,
            audio_embed: read_matrix(root, &entry.features.audio_embed, id, "audio_embed")?,
        };
        features.validate()?;
        if features.segments() != t {
            return Err(Error::validation(id, format!("features have {} segments, manifest declares {t}", features.segments())));
        }
        let w = features.streams().map(|(_, m)| m.cols());
        match widths {
            None => widths = Some(w),
            Some(prev) if prev != w => {
                return Err(Error::validation(id, format!("feature widths {w:?} differ from {prev:?}")));
            }
            _ => {}
        }

        let labels = LabelSet {
            video_labels: LabelSet::from_indices(&entry.video_labels, c)
                .map_err(|e| Error::validation(id, e.to_string()))?,
            segment_visual: entry
                .segment_visual
                .as_ref()
                .map(|g| indices_to_grid(id, "segment_visual", g, t, c))
                .transpose()?,
            segment_audio: entry
                .segment_audio
                .as_ref()
                .map(|g| indices_to_grid(id, "segment_audio", g, t, c))
                .transpose()?,
            segment_av_supervised: entry
                .segment_av_supervised
                .as_ref()
                .map(|g| indices_to_grid(id, "segment_av_supervised", g, t, c))
                .transpose()?,
            segment_single: None,
        };
        labels.validate(id, t, c)?;
        videos.push(VideoRecord { features, labels });
    }

    let [_, _, d1, d2] = widths.expect("at least one video");
    if text_emb.visual_text.cols() != d1 || text_emb.audio_text.cols() != d2 {
        return Err(Error::validation(
            "<text>",
            format!(
                "text embedding widths {}/{} differ from embedding features {d1}/{d2}",
                text_emb.visual_text.cols(),
                text_emb.audio_text.cols()
            ),
        ));
    }
    if manifest.mode == DatasetMode::Supervised {
        if let Some(v) = videos.iter().find(|v| v.labels.segment_av_supervised.is_none()) {
            return Err(Error::validation(v.id(), "supervised manifest entry lacks segment_av_supervised"));
        }
    }

    Ok(Dataset {
        mode: manifest.mode,
        segments: t,
        vocab: manifest.vocabulary,
        text: text_emb,
        videos,
    })
}

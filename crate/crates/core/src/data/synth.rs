//! Deterministic synthetic datasets with planted segment-level events.
//!
//! Each class owns a fixed random unit prototype in every feature space
//! (orthonormal when the space is wide enough). A segment feature is the sum
//! of the prototypes of the classes active in that modality plus isotropic
//! Gaussian noise. The embedding-space prototypes double as the text event
//! embeddings, so inner products between clean features and text rows are
//! exactly 1 for active and 0 for inactive classes.
//!
//! Prototypes are drawn from `prototype_seed` and videos from the run seed,
//! so a supervised pre-training set and a weak target set generated with
//! different seeds share the same feature geometry.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::labels_io::{write_ground_truth, GroundTruthFile, VideoGroundTruth};
use super::manifest::{grid_to_indices, write_manifest, FeaturePaths, Manifest, ManifestVideo, TextEmbeddingPaths, MANIFEST_FORMAT};
use super::{BinaryGrid, DatasetMode, EventVocabulary};
use crate::error::{Error, Result};
use crate::tensor::io::{write_tensor, RawTensor};

const CLASS_NAMES: [&str; 25] = [
    "speech", "car", "cheering", "dog", "cat", "frying food", "basketball bounce", "fire alarm",
    "chainsaw", "cello", "banjo", "singing", "chicken rooster", "violin fiddle", "vacuum cleaner",
    "baby laughter", "accordion", "lawn mower", "motorcycle", "helicopter", "acoustic guitar",
    "telephone bell ringing", "baby cry infant cry", "blender", "clapping",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub mode: DatasetMode,
    /// Training videos.
    pub n_videos: usize,
    /// Held-out evaluation videos (written as a separate manifest).
    pub n_eval: usize,
    pub num_classes: usize,
    pub segments: usize,
    pub dim_visual: usize,
    pub dim_audio: usize,
    pub dim_visual_embed: usize,
    pub dim_audio_embed: usize,
    /// Per-dimension Gaussian noise standard deviation.
    pub noise: f64,
    pub min_events: usize,
    pub max_events: usize,
    /// Event lengths are uniform in `[min_event_len, max_event_len]`. The
    /// defaults keep roughly half of the segments of a labeled class active
    /// in each modality.
    pub min_event_len: usize,
    pub max_event_len: usize,
    /// Allow uni-modal (visual-only / audio-only) events.
    pub misalignment: bool,
    /// Probability that an event is audio-visual when misalignment is allowed.
    pub av_event_prob: f64,
    pub prototype_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            mode: DatasetMode::Weak,
            n_videos: 200,
            n_eval: 0,
            num_classes: 8,
            segments: 10,
            dim_visual: 32,
            dim_audio: 32,
            dim_visual_embed: 32,
            dim_audio_embed: 32,
            noise: 0.3,
            min_events: 1,
            max_events: 3,
            min_event_len: 3,
            max_event_len: 9,
            misalignment: true,
            av_event_prob: 0.6,
            prototype_seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn supervised(n_videos: usize) -> Self {
        Self {
            mode: DatasetMode::Supervised,
            n_videos,
            misalignment: false,
            max_event_len: 7,
            ..Self::default()
        }
    }

    pub fn weak(n_videos: usize, n_eval: usize) -> Self {
        Self {
            n_videos,
            n_eval,
            ..Self::default()
        }
    }

    pub fn ave(n_videos: usize, n_eval: usize) -> Self {
        Self {
            mode: DatasetMode::Ave,
            n_videos,
            n_eval,
            min_events: 1,
            max_events: 1,
            max_event_len: 7,
            misalignment: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_classes == 0 {
            return bad("synthetic dataset needs at least one class");
        }
        if self.segments == 0 {
            return bad("synthetic dataset needs at least one segment");
        }
        if self.n_videos == 0 {
            return bad("synthetic dataset needs at least one video");
        }
        if [self.dim_visual, self.dim_audio, self.dim_visual_embed, self.dim_audio_embed].contains(&0) {
            return bad("feature dimensions must be positive");
        }
        if self.min_events == 0 || self.min_events > self.max_events || self.max_events > self.num_classes {
            return bad("need 1 <= min_events <= max_events <= num_classes");
        }
        if self.min_event_len == 0 || self.min_event_len > self.max_event_len.min(self.segments) {
            return bad("need 1 <= min_event_len <= min(max_event_len, segments)");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be a finite non-negative number");
        }
        if !(0.0..=1.0).contains(&self.av_event_prob) {
            return bad("av_event_prob must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Paths written by [`synth_dataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub manifest: PathBuf,
    pub ground_truth: PathBuf,
    pub eval_manifest: Option<PathBuf>,
    pub eval_ground_truth: Option<PathBuf>,
}

/// Planted activity of one video.
#[derive(Debug, Clone)]
struct PlantedVideo {
    classes: Vec<usize>,
    visual: BinaryGrid,
    audio: BinaryGrid,
    single: Option<Vec<Option<usize>>>,
}

struct Prototypes {
    visual_backbone: Vec<Vec<f64>>,
    audio_backbone: Vec<Vec<f64>>,
    visual_embed: Vec<Vec<f64>>,
    audio_embed: Vec<Vec<f64>>,
}

/// `count` unit vectors of width `dim`, orthonormal when `count <= dim`.
fn unit_prototypes(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        if count <= dim {
            for u in &out {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue;
        }
        out.push(v.into_iter().map(|a| a / norm).collect());
    }
    out
}

impl Prototypes {
    fn new(cfg: &SynthConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.prototype_seed);
        let c = cfg.num_classes;
        Self {
            visual_backbone: unit_prototypes(&mut rng, c, cfg.dim_visual),
            audio_backbone: unit_prototypes(&mut rng, c, cfg.dim_audio),
            visual_embed: unit_prototypes(&mut rng, c, cfg.dim_visual_embed),
            audio_embed: unit_prototypes(&mut rng, c, cfg.dim_audio_embed),
        }
    }
}

fn class_names(c: usize) -> Vec<String> {
    (0..c)
        .map(|k| CLASS_NAMES.get(k).map_or_else(|| format!("event {k}"), |s| s.to_string()))
        .collect()
}

fn sample_interval(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> (usize, usize) {
    let max_len = cfg.max_event_len.min(cfg.segments);
    let len = rng.random_range(cfg.min_event_len..=max_len);
    let start = rng.random_range(0..=cfg.segments - len);
    (start, start + len)
}

fn plant_video(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> PlantedVideo {
    let (t, c) = (cfg.segments, cfg.num_classes);
    let n_events = rng.random_range(cfg.min_events..=cfg.max_events);
    let mut all: Vec<usize> = (0..c).collect();
    all.shuffle(rng);
    let mut classes: Vec<usize> = all[..n_events].to_vec();
    classes.sort_unstable();

    let mut visual = vec![vec![0u8; c]; t];
    let mut audio = vec![vec![0u8; c]; t];
    let mut single = (cfg.mode == DatasetMode::Ave).then(|| vec![None; t]);
    for &k in &classes {
        let (in_visual, in_audio) = if cfg.misalignment && cfg.mode != DatasetMode::Ave {
            if rng.random_bool(cfg.av_event_prob) {
                (true, true)
            } else if rng.random_bool(0.5) {
                (true, false)
            } else {
                (false, true)
            }
        } else {
            (true, true)
        };
        let (start, end) = sample_interval(rng, cfg);
        for s in start..end {
            if in_visual {
                visual[s][k] = 1;
            }
            if in_audio {
                audio[s][k] = 1;
            }
            if let Some(track) = single.as_mut() {
                track[s] = Some(k);
            }
        }
    }
    PlantedVideo {
        classes,
        visual,
        audio,
        single,
    }
}

#[allow(clippy::needless_range_loop)]
fn render(rng: &mut ChaCha8Rng, activity: &BinaryGrid, protos: &[Vec<f64>], noise: f64) -> RawTensor {
    let dim = protos[0].len();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut data = Vec::with_capacity(activity.len() * dim);
    for row in activity {
        for j in 0..dim {
            let clean: f64 = row
                .iter()
                .enumerate()
                .filter(|(_, &a)| a == 1)
                .map(|(k, _)| protos[k][j])
                .sum();
            let eps = if noise > 0.0 { noise * normal.sample(rng) } else { 0.0 };
            data.push((clean + eps) as f32);
        }
    }
    RawTensor::new(vec![activity.len(), dim], data).expect("consistent shape")
}

fn conjunction(a: &BinaryGrid, b: &BinaryGrid) -> BinaryGrid {
    a.iter()
        .zip(b)
        .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| x & y).collect())
        .collect()
}

fn write_split(
    out: &Path,
    prefix: &str,
    count: usize,
    cfg: &SynthConfig,
    protos: &Prototypes,
    rng: &mut ChaCha8Rng,
) -> Result<(PathBuf, PathBuf)> {
    let mut videos = Vec::with_capacity(count);
    let mut gt = GroundTruthFile::default();
    for i in 0..count {
        let id = format!("{prefix}_{i:05}");
        let planted = plant_video(rng, cfg);
        let streams = [
            ("vb", render(rng, &planted.visual, &protos.visual_backbone, cfg.noise)),
            ("ab", render(rng, &planted.audio, &protos.audio_backbone, cfg.noise)),
            ("ve", render(rng, &planted.visual, &protos.visual_embed, cfg.noise)),
            ("ae", render(rng, &planted.audio, &protos.audio_embed, cfg.noise)),
        ];
        let mut rel = Vec::with_capacity(4);
        for (tag, m) in &streams {
            let p = PathBuf::from("features").join(format!("{id}.{tag}.uwt"));
            write_tensor(&out.join(&p), m)?;
            rel.push(p);
        }
        let supervised = cfg.mode == DatasetMode::Supervised;
        videos.push(ManifestVideo {
            video_id: id.clone(),
            features: FeaturePaths {
                visual_backbone: rel[0].clone(),
                audio_backbone: rel[1].clone(),
                visual_embed: rel[2].clone(),
                audio_embed: rel[3].clone(),
            },
            video_labels: planted.classes.clone(),
            segment_visual: None,
            segment_audio: None,
            segment_av_supervised: supervised.then(|| grid_to_indices(&conjunction(&planted.visual, &planted.audio))),
        });
        gt.videos.insert(
            id,
            VideoGroundTruth {
                segment_visual: planted.visual,
                segment_audio: planted.audio,
                segment_single: planted.single,
            },
        );
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT.to_string(),
        mode: cfg.mode,
        segments: cfg.segments,
        vocabulary: EventVocabulary::new(class_names(cfg.num_classes))?,
        text_embeddings: TextEmbeddingPaths {
            visual: PathBuf::from("text_visual.uwt"),
            audio: PathBuf::from("text_audio.uwt"),
        },
        videos,
    };
    let (manifest_name, gt_name) = if prefix == "train" {
        ("manifest.json", "gt.json")
    } else {
        ("eval_manifest.json", "eval_gt.json")
    };
    let manifest_path = out.join(manifest_name);
    let gt_path = out.join(gt_name);
    write_manifest(&manifest_path, &manifest)?;
    write_ground_truth(&gt_path, &gt)?;
    Ok((manifest_path, gt_path))
}

fn to_raw(protos: &[Vec<f64>]) -> RawTensor {
    let data = protos.iter().flatten().map(|&v| v as f32).collect();
    RawTensor::new(vec![protos.len(), protos[0].len()], data).expect("consistent shape")
}

/// Writes a manifest, feature files, text embeddings and ground-truth
/// sidecars under `out`. Identical `(cfg, seed)` produce identical bytes.
pub fn synth_dataset(cfg: &SynthConfig, seed: u64, out: &Path) -> Result<SynthOutput> {
    cfg.validate()?;
    let protos = Prototypes::new(cfg);
    write_tensor(&out.join("text_visual.uwt"), &to_raw(&protos.visual_embed))?;
    write_tensor(&out.join("text_audio.uwt"), &to_raw(&protos.audio_embed))?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (manifest, ground_truth) = write_split(out, "train", cfg.n_videos, cfg, &protos, &mut rng)?;
    let (eval_manifest, eval_ground_truth) = if cfg.n_eval > 0 {
        let (m, g) = write_split(out, "eval", cfg.n_eval, cfg, &protos, &mut rng)?;
        (Some(m), Some(g))
    } else {
        (None, None)
    };
    Ok(SynthOutput {
        manifest,
        ground_truth,
        eval_manifest,
        eval_ground_truth,
    })
}

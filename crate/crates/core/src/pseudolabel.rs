//! Temporal pseudo-label generator: per-modality transformer encoders over
//! segment embeddings, scored against class text embeddings, pre-trained
//! with an audio-visual product loss and turned into masked binary and soft
//! labels through per-class thresholds.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{encoder_block_train, positional_encoding_tensor, EncoderBlockParams, EncoderConfig};
use crate::data::{
    BinaryGrid, CalibrationMeta, Dataset, DatasetMode, FeatureBundle, PseudoLabelFile, PseudoLabelSet, TextEmbeddings,
};
use crate::error::{Error, Result};
use crate::nn::{join, Module};
use crate::pipeline::checkpoint::{save_epoch, CheckpointContent, CheckpointPolicy};
use crate::pipeline::trainer::{fit, EpochRecord, StepOutput, TrainConfig, TrainState};
use crate::tensor::ops::sigmoid_scalar;
use crate::tensor::{Elem, Tensor};

pub const CHECKPOINT_KIND: &str = "pseudolabeler";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PseudoLabelerConfig {
    pub encoder: EncoderConfig,
    pub dim_visual: usize,
    pub dim_audio: usize,
}

impl Default for PseudoLabelerConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            dim_visual: 32,
            dim_audio: 32,
        }
    }
}

impl PseudoLabelerConfig {
    /// Widths taken from the dataset's embedding features.
    pub fn for_dataset(dataset: &Dataset, encoder: EncoderConfig) -> Self {
        let (_, _, d1, d2) = dataset.dims();
        Self {
            encoder,
            dim_visual: d1,
            dim_audio: d2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PseudoLabelerModel<E: Elem = f32> {
    pub config: PseudoLabelerConfig,
    pub visual: Vec<EncoderBlockParams<E>>,
    pub audio: Vec<EncoderBlockParams<E>>,
}

impl<E: Elem> Module<E> for PseudoLabelerModel<E> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        for (i, b) in self.visual.iter().enumerate() {
            b.collect_params(&join(prefix, &format!("visual.{i}")), out);
        }
        for (i, b) in self.audio.iter().enumerate() {
            b.collect_params(&join(prefix, &format!("audio.{i}")), out);
        }
    }
}

/// Segment embeddings of one video as constants.
#[derive(Debug, Clone)]
pub struct EmbedInputs<E: Elem> {
    pub visual: Tensor<E>,
    pub audio: Tensor<E>,
}

impl<E: Elem> EmbedInputs<E> {
    pub fn from_bundle(b: &FeatureBundle) -> Result<Self> {
        Ok(Self {
            visual: b.visual_embed.to_tensor()?,
            audio: b.audio_embed.to_tensor()?,
        })
    }
}

/// Class text embeddings (`C x d`) as constants.
#[derive(Debug, Clone)]
pub struct TextTensors<E: Elem> {
    pub visual: Tensor<E>,
    pub audio: Tensor<E>,
}

impl<E: Elem> TextTensors<E> {
    pub fn new(text: &TextEmbeddings) -> Result<Self> {
        Ok(Self {
            visual: text.visual_text.to_tensor()?,
            audio: text.audio_text.to_tensor()?,
        })
    }
}

impl<E: Elem> PseudoLabelerModel<E> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, config: PseudoLabelerConfig) -> Result<Self> {
        config.encoder.validate()?;
        let stack = |rng: &mut R, d: usize| -> Result<Vec<EncoderBlockParams<E>>> {
            (0..config.encoder.blocks)
                .map(|_| EncoderBlockParams::new(rng, d, &config.encoder))
                .collect()
        };
        let visual = stack(rng, config.dim_visual)?;
        let audio = stack(rng, config.dim_audio)?;
        Ok(Self { config, visual, audio })
    }

    fn encode<R: Rng + ?Sized>(
        &self,
        blocks: &[EncoderBlockParams<E>],
        x: &Tensor<E>,
        mut rng: Option<&mut R>,
    ) -> Result<Tensor<E>> {
        let mut g = if self.config.encoder.positional_encoding {
            let [t, d] = x.shape() else {
                return Err(Error::shape(format!("segment features must be T x d, got {:?}", x.shape())));
            };
            x.add(&positional_encoding_tensor(*t, *d))?
        } else {
            x.clone()
        };
        for b in blocks {
            g = encoder_block_train(&g, b, rng.as_deref_mut())?;
        }
        Ok(g)
    }

    /// Final visual encoder states `G_L` (`T x d1`).
    pub fn visual_states(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        self.encode::<rand_chacha::ChaCha8Rng>(&self.visual, x, None)
    }

    pub fn audio_states(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        self.encode::<rand_chacha::ChaCha8Rng>(&self.audio, x, None)
    }

    /// Visual and audio segment logits (`T x C` each). `rng` enables dropout.
    pub fn logits_train<R: Rng + ?Sized>(
        &self,
        inputs: &EmbedInputs<E>,
        text: &TextTensors<E>,
        mut rng: Option<&mut R>,
    ) -> Result<(Tensor<E>, Tensor<E>)> {
        let gv = self.encode(&self.visual, &inputs.visual, rng.as_deref_mut())?;
        let ga = self.encode(&self.audio, &inputs.audio, rng)?;
        Ok((segment_logits(&gv, &text.visual)?, segment_logits(&ga, &text.audio)?))
    }

    pub fn logits(&self, inputs: &EmbedInputs<E>, text: &TextTensors<E>) -> Result<(Tensor<E>, Tensor<E>)> {
        self.logits_train::<rand_chacha::ChaCha8Rng>(inputs, text, None)
    }
}

/// `z[t][c] = <g_t, e_c>` for states `T x d` and text embeddings `C x d`.
pub fn segment_logits<E: Elem>(g: &Tensor<E>, text: &Tensor<E>) -> Result<Tensor<E>> {
    match (g.shape(), text.shape()) {
        ([_, a], [_, b]) if a == b => g.matmul(&text.transpose()?),
        (gs, ts) => Err(Error::shape(format!("states {gs:?} and text embeddings {ts:?} differ in width"))),
    }
}

/// BCE between the audio-visual product `sigmoid(z_v) * sigmoid(z_a)` and
/// the audio-visual segment labels.
pub fn pretrain_loss<E: Elem>(z_v: &Tensor<E>, z_a: &Tensor<E>, y_av: &Tensor<E>) -> Result<Tensor<E>> {
    if z_v.shape() != z_a.shape() || z_v.shape() != y_av.shape() {
        return Err(Error::shape(format!(
            "logits {:?}/{:?} and labels {:?} differ",
            z_v.shape(),
            z_a.shape(),
            y_av.shape()
        )));
    }
    z_v.sigmoid()?.mul(&z_a.sigmoid()?)?.bce(y_av, None)
}

pub fn grid_tensor<E: Elem>(grid: &BinaryGrid) -> Result<Tensor<E>> {
    let rows = grid.len();
    let cols = grid.first().map_or(0, Vec::len);
    let data = grid.iter().flatten().map(|&v| E::from_f64(v as f64)).collect();
    Tensor::new(vec![rows, cols], data)
}

/// Result of a pre-training run.
pub struct PretrainOutcome<E: Elem> {
    pub log: Vec<EpochRecord>,
    pub state: TrainState<E>,
}

/// Trains both encoders on a supervised dataset with the audio-visual
/// product loss. Resumes from `state` when given.
pub fn run_pretraining<E: Elem>(
    model: &PseudoLabelerModel<E>,
    dataset: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
    checkpoint: Option<&CheckpointPolicy>,
    state: Option<TrainState<E>>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<PretrainOutcome<E>> {
    if dataset.mode != DatasetMode::Supervised {
        return Err(Error::Mode(format!(
            "pre-training needs a supervised dataset, got {:?}",
            dataset.mode
        )));
    }
    let text = TextTensors::<E>::new(&dataset.text)?;
    let mut inputs = Vec::with_capacity(dataset.videos.len());
    let mut targets = Vec::with_capacity(dataset.videos.len());
    for v in &dataset.videos {
        let y = v
            .labels
            .segment_av_supervised
            .as_ref()
            .ok_or_else(|| Error::Mode(format!("video {} has no audio-visual segment labels", v.id())))?;
        inputs.push(EmbedInputs::<E>::from_bundle(&v.features)?);
        targets.push(grid_tensor::<E>(y)?);
    }
    let class_names = dataset.vocab.class_names.clone();
    let mut state = state.unwrap_or_else(|| TrainState::fresh(cfg));
    let dropout = model.config.encoder.dropout > 0.0;
    let log = fit(
        model,
        inputs.len(),
        cfg,
        seed,
        &mut state,
        |batch, rng| {
            let mut losses = Vec::with_capacity(batch.len());
            for &i in batch {
                let (zv, za) = model.logits_train(&inputs[i], &text, dropout.then_some(&mut *rng))?;
                losses.push(pretrain_loss(&zv, &za, &targets[i])?);
            }
            let loss = Tensor::add_n(&losses)?.scale(1.0 / batch.len() as f64)?;
            Ok(StepOutput {
                components: vec![("temporal", loss.item().as_f64())],
                loss,
            })
        },
        |record, st| {
            on_epoch(record);
            if let Some(policy) = checkpoint {
                save_epoch(
                    policy,
                    model,
                    &CheckpointContent {
                        kind: CHECKPOINT_KIND,
                        config: &model.config,
                        class_names: &class_names,
                        epochs_done: st.next_epoch,
                        optimizer: Some(&st.optimizer),
                    },
                )?;
            }
            Ok(())
        },
    )?;
    Ok(PretrainOutcome { log, state })
}

/// Row-major `T x C` logits of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoLogits {
    pub video_id: String,
    pub segments: usize,
    pub classes: usize,
    pub visual: Vec<f64>,
    pub audio: Vec<f64>,
}

pub fn compute_logits<E: Elem>(model: &PseudoLabelerModel<E>, dataset: &Dataset) -> Result<Vec<VideoLogits>> {
    let text = TextTensors::<E>::new(&dataset.text)?;
    dataset
        .videos
        .iter()
        .map(|v| {
            let (zv, za) = model.logits(&EmbedInputs::from_bundle(&v.features)?, &text)?;
            Ok(VideoLogits {
                video_id: v.id().to_string(),
                segments: dataset.segments,
                classes: dataset.num_classes(),
                visual: zv.to_f64_vec(),
                audio: za.to_f64_vec(),
            })
        })
        .collect()
}

/// Per-class thresholds for both modalities with their provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdVector {
    pub visual: Vec<f64>,
    pub audio: Vec<f64>,
    pub meta: CalibrationMeta,
}

/// Linear-interpolation quantile of an ascending slice.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// For each class, the `q`-quantile of the logits pooled over every segment
/// of every video labeled with that class; `+inf` for classes that never
/// occur.
pub fn class_quantiles(logits: &[&[f64]], labels: &[&[u8]], classes: usize, q: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Config(format!("quantile {q} outside [0, 1]")));
    }
    if logits.is_empty() {
        return Err(Error::Calibration("no videos to calibrate on".into()));
    }
    if logits.len() != labels.len() {
        return Err(Error::shape("logit and label counts differ"));
    }
    let mut pools: Vec<Vec<f64>> = vec![Vec::new(); classes];
    for (z, y) in logits.iter().zip(labels) {
        if y.len() != classes || z.len() % classes != 0 {
            return Err(Error::shape(format!("expected {classes} classes per row")));
        }
        for row in z.chunks(classes) {
            for c in (0..classes).filter(|&c| y[c] == 1) {
                pools[c].push(row[c]);
            }
        }
    }
    Ok(pools
        .into_iter()
        .map(|mut pool| {
            if pool.is_empty() {
                return f64::INFINITY;
            }
            pool.sort_by(f64::total_cmp);
            quantile_sorted(&pool, q)
        })
        .collect())
}

pub fn calibrate_thresholds(
    logits: &[VideoLogits],
    video_labels: &[&[u8]],
    q: f64,
    source: &str,
) -> Result<ThresholdVector> {
    let classes = logits.first().map_or(0, |l| l.classes);
    let zv: Vec<&[f64]> = logits.iter().map(|l| l.visual.as_slice()).collect();
    let za: Vec<&[f64]> = logits.iter().map(|l| l.audio.as_slice()).collect();
    Ok(ThresholdVector {
        visual: class_quantiles(&zv, video_labels, classes, q)?,
        audio: class_quantiles(&za, video_labels, classes, q)?,
        meta: CalibrationMeta {
            method: "quantile".into(),
            quantile: q,
            source: source.to_string(),
        },
    })
}

/// `1[z > theta] * y`, row-major `T x C` logits.
pub fn binary_pseudo_labels(z: &[f64], thresholds: &[f64], y: &[u8]) -> BinaryGrid {
    let c = thresholds.len();
    z.chunks(c)
        .map(|row| (0..c).map(|k| u8::from(y[k] == 1 && row[k] > thresholds[k])).collect())
        .collect()
}

/// `sigmoid(z - theta) * y`. A logit a hair above its threshold can round
/// to exactly 0.5; it is nudged up one ulp so the soft label stays above
/// 0.5 whenever the binary label is 1.
pub fn soft_pseudo_labels(z: &[f64], thresholds: &[f64], y: &[u8]) -> Vec<Vec<f64>> {
    let c = thresholds.len();
    let above_half = f64::from_bits(0.5f64.to_bits() + 1);
    z.chunks(c)
        .map(|row| {
            (0..c)
                .map(|k| {
                    if y[k] == 0 {
                        return 0.0;
                    }
                    let p = sigmoid_scalar(row[k] - thresholds[k]);
                    if row[k] > thresholds[k] && p <= 0.5 {
                        above_half
                    } else {
                        p
                    }
                })
                .collect()
        })
        .collect()
}

pub fn pseudo_label_set(logits: &VideoLogits, th: &ThresholdVector, y: &[u8]) -> PseudoLabelSet {
    PseudoLabelSet {
        binary_visual: binary_pseudo_labels(&logits.visual, &th.visual, y),
        binary_audio: binary_pseudo_labels(&logits.audio, &th.audio, y),
        soft_visual: soft_pseudo_labels(&logits.visual, &th.visual, y),
        soft_audio: soft_pseudo_labels(&logits.audio, &th.audio, y),
        thresholds_visual: th.visual.clone(),
        thresholds_audio: th.audio.clone(),
    }
}

/// Calibrates on `dataset` itself and labels every video, ordered by id.
pub fn emit_pseudo_labels<E: Elem>(
    model: &PseudoLabelerModel<E>,
    dataset: &Dataset,
    q: f64,
    source: &str,
) -> Result<(PseudoLabelFile, ThresholdVector)> {
    pseudo_labels_from_logits(&compute_logits(model, dataset)?, dataset, q, source)
}

/// Logits planted around the ground truth: 1 for an active cell, 0 for an
/// inactive one, plus Gaussian noise of width `noise`. Stands in for a
/// pre-trained generator of known quality when studying stage-2 training.
pub fn noisy_ground_truth_logits<R: Rng + ?Sized>(dataset: &Dataset, noise: f64, rng: &mut R) -> Result<Vec<VideoLogits>> {
    if !dataset.has_ground_truth() {
        return Err(Error::Mode("noisy logits need segment-level ground truth".into()));
    }
    let normal = rand_distr::Normal::new(0.0, noise)
        .map_err(|e| Error::Config(format!("noise {noise}: {e}")))?;
    let mut plant = |grid: &BinaryGrid| -> Vec<f64> {
        grid.iter()
            .flatten()
            .map(|&g| f64::from(g) + rand_distr::Distribution::sample(&normal, rng))
            .collect()
    };
    dataset
        .videos
        .iter()
        .map(|v| {
            let visual = plant(v.labels.segment_visual.as_ref().expect("checked above"));
            let audio = plant(v.labels.segment_audio.as_ref().expect("checked above"));
            Ok(VideoLogits {
                video_id: v.id().to_string(),
                segments: dataset.segments,
                classes: dataset.num_classes(),
                visual,
                audio,
            })
        })
        .collect()
}

/// Calibrates on precomputed logits and labels every video.
pub fn pseudo_labels_from_logits(
    logits: &[VideoLogits],
    dataset: &Dataset,
    q: f64,
    source: &str,
) -> Result<(PseudoLabelFile, ThresholdVector)> {
    let labels: Vec<&[u8]> = dataset.videos.iter().map(|v| v.labels.video_labels.as_slice()).collect();
    let th = calibrate_thresholds(logits, &labels, q, source)?;
    let mut file = PseudoLabelFile::new(&th.visual, &th.audio, Some(th.meta.clone()));
    for (l, y) in logits.iter().zip(&labels) {
        file.insert(&l.video_id, &pseudo_label_set(l, &th, y));
    }
    Ok((file, th))
}

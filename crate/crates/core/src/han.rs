//! The inference model: input projections, one hybrid attention layer, a
//! classifier shared by both modalities, and attentive multi-modal
//! multiple-instance pooling into video-level probabilities.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{han_layer, HanLayerParams};
use crate::data::{BinaryGrid, FeatureBundle};
use crate::error::{Error, Result};
use crate::nn::{join, Linear, Module};
use crate::tensor::{Elem, Tensor};

pub const CHECKPOINT_KIND: &str = "han";
/// Pooled probabilities are clamped to `[POOL_EPS, 1 - POOL_EPS]`.
pub const POOL_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HanConfig {
    pub dim_visual: usize,
    pub dim_audio: usize,
    pub hidden: usize,
    pub heads: usize,
    pub num_classes: usize,
}

impl Default for HanConfig {
    fn default() -> Self {
        Self {
            dim_visual: 32,
            dim_audio: 32,
            hidden: 64,
            heads: 4,
            num_classes: 8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HanModel<E: Elem = f32> {
    pub config: HanConfig,
    pub proj_visual: Linear<E>,
    pub proj_audio: Linear<E>,
    pub layer: HanLayerParams<E>,
    pub classifier: Linear<E>,
    pub fc_modal: Linear<E>,
    pub fc_time: Linear<E>,
}

impl<E: Elem> Module<E> for HanModel<E> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        self.proj_visual.collect_params(&join(prefix, "proj_visual"), out);
        self.proj_audio.collect_params(&join(prefix, "proj_audio"), out);
        self.layer.collect_params(&join(prefix, "han"), out);
        self.classifier.collect_params(&join(prefix, "classifier"), out);
        self.fc_modal.collect_params(&join(prefix, "fc_modal"), out);
        self.fc_time.collect_params(&join(prefix, "fc_time"), out);
    }
}

/// Everything computed by one forward pass, still attached to the graph.
pub struct HanForward<E: Elem> {
    /// Post-attention segment features, `T x d` each.
    pub features_visual: Tensor<E>,
    pub features_audio: Tensor<E>,
    pub logits_visual: Tensor<E>,
    pub logits_audio: Tensor<E>,
    pub probs_visual: Tensor<E>,
    pub probs_audio: Tensor<E>,
    pub pool: MmilOutput<E>,
}

pub struct MmilOutput<E: Elem> {
    /// Weighted sum before clamping, length `C`.
    pub raw: Tensor<E>,
    /// Clamped video probabilities.
    pub video_probs: Tensor<E>,
    /// `2 x T x C`, softmax over the modality axis.
    pub w_modal: Tensor<E>,
    /// `2 x T x C`, softmax over the time axis.
    pub w_time: Tensor<E>,
}

/// Plain-value copy of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentPredictions {
    pub segments: usize,
    pub classes: usize,
    pub visual_probs: Vec<f64>,
    pub audio_probs: Vec<f64>,
    pub visual_logits: Vec<f64>,
    pub audio_logits: Vec<f64>,
    pub video_probs: Vec<f64>,
    pub w_modal: Vec<f64>,
    pub w_time: Vec<f64>,
}

impl SegmentPredictions {
    pub fn visual_at(&self, t: usize, c: usize) -> f64 {
        self.visual_probs[t * self.classes + c]
    }

    pub fn audio_at(&self, t: usize, c: usize) -> f64 {
        self.audio_probs[t * self.classes + c]
    }
}

impl<E: Elem> HanForward<E> {
    pub fn predictions(&self) -> SegmentPredictions {
        let shape = self.probs_visual.shape();
        SegmentPredictions {
            segments: shape[0],
            classes: shape[1],
            visual_probs: self.probs_visual.to_f64_vec(),
            audio_probs: self.probs_audio.to_f64_vec(),
            visual_logits: self.logits_visual.to_f64_vec(),
            audio_logits: self.logits_audio.to_f64_vec(),
            video_probs: self.pool.video_probs.to_f64_vec(),
            w_modal: self.pool.w_modal.to_f64_vec(),
            w_time: self.pool.w_time.to_f64_vec(),
        }
    }
}

/// Backbone features of one video as constants.
#[derive(Debug, Clone)]
pub struct BackboneInputs<E: Elem> {
    pub visual: Tensor<E>,
    pub audio: Tensor<E>,
}

impl<E: Elem> BackboneInputs<E> {
    pub fn from_bundle(b: &FeatureBundle) -> Result<Self> {
        Ok(Self {
            visual: b.visual_backbone.to_tensor()?,
            audio: b.audio_backbone.to_tensor()?,
        })
    }
}

/// Attention weights over modalities and time, then
/// `p = sum_m sum_t W_modal * W_time * p_m,t`, clamped.
pub fn mmil_pool<E: Elem>(
    f_v: &Tensor<E>,
    f_a: &Tensor<E>,
    p_v: &Tensor<E>,
    p_a: &Tensor<E>,
    fc_modal: &Linear<E>,
    fc_time: &Linear<E>,
) -> Result<MmilOutput<E>> {
    if p_v.shape() != p_a.shape() || f_v.shape()[0] != p_v.shape()[0] {
        return Err(Error::shape(format!(
            "pooling inputs disagree: features {:?}/{:?}, probabilities {:?}/{:?}",
            f_v.shape(),
            f_a.shape(),
            p_v.shape(),
            p_a.shape()
        )));
    }
    let modal = Tensor::stack(&[fc_modal.forward(f_v)?, fc_modal.forward(f_a)?])?;
    let time = Tensor::stack(&[fc_time.forward(f_v)?, fc_time.forward(f_a)?])?;
    let w_modal = modal.softmax(0)?;
    let w_time = time.softmax(1)?;
    let probs = Tensor::stack(&[p_v.clone(), p_a.clone()])?;
    let raw = w_modal.mul(&w_time)?.mul(&probs)?.sum_axis(0)?.sum_axis(0)?;
    let video_probs = raw.clamp(POOL_EPS, 1.0 - POOL_EPS)?;
    Ok(MmilOutput {
        raw,
        video_probs,
        w_modal,
        w_time,
    })
}

impl<E: Elem> HanModel<E> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, config: HanConfig) -> Result<Self> {
        if config.num_classes == 0 || config.hidden == 0 {
            return Err(Error::Config("model needs at least one class and a positive width".into()));
        }
        let d = config.hidden;
        Ok(Self {
            config,
            proj_visual: Linear::new(rng, config.dim_visual, d),
            proj_audio: Linear::new(rng, config.dim_audio, d),
            layer: HanLayerParams::new(rng, d, config.heads)?,
            classifier: Linear::new(rng, d, config.num_classes),
            fc_modal: Linear::new(rng, d, config.num_classes),
            fc_time: Linear::new(rng, d, config.num_classes),
        })
    }

    /// Segment logits of the shared classifier for `T x d` features.
    pub fn classify(&self, features: &Tensor<E>) -> Result<Tensor<E>> {
        self.classifier.forward(features)
    }

    pub fn forward(&self, inputs: &BackboneInputs<E>) -> Result<HanForward<E>> {
        let hv = self.proj_visual.forward(&inputs.visual)?;
        let ha = self.proj_audio.forward(&inputs.audio)?;
        let (fv, fa) = han_layer(&hv, &ha, &self.layer)?;
        let zv = self.classify(&fv)?;
        let za = self.classify(&fa)?;
        let pv = zv.sigmoid()?;
        let pa = za.sigmoid()?;
        let pool = mmil_pool(&fv, &fa, &pv, &pa, &self.fc_modal, &self.fc_time)?;
        Ok(HanForward {
            features_visual: fv,
            features_audio: fa,
            logits_visual: zv,
            logits_audio: za,
            probs_visual: pv,
            probs_audio: pa,
            pool,
        })
    }
}

pub fn han_forward<E: Elem>(bundle: &FeatureBundle, model: &HanModel<E>) -> Result<SegmentPredictions> {
    Ok(model.forward(&BackboneInputs::from_bundle(bundle)?)?.predictions())
}

/// Mean BCE over classes between pooled probabilities and video labels.
pub fn video_loss<E: Elem>(p: &Tensor<E>, y: &Tensor<E>) -> Result<Tensor<E>> {
    p.bce(y, None)
}

/// Thresholded segment decisions; the audio-visual grid is the conjunction.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryPredictions {
    pub visual: BinaryGrid,
    pub audio: BinaryGrid,
    pub av: BinaryGrid,
}

pub fn predict_segments(preds: &SegmentPredictions, tau: f64) -> BinaryPredictions {
    let grid = |probs: &[f64]| -> BinaryGrid {
        probs
            .chunks(preds.classes)
            .map(|row| row.iter().map(|&p| u8::from(p > tau)).collect())
            .collect()
    };
    let visual = grid(&preds.visual_probs);
    let audio = grid(&preds.audio_probs);
    let av = visual
        .iter()
        .zip(&audio)
        .map(|(v, a)| v.iter().zip(a).map(|(x, y)| x & y).collect())
        .collect();
    BinaryPredictions { visual, audio, av }
}

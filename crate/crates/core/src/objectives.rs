//! Stage-two training losses: hard and soft pseudo-label BCE, class-balanced
//! re-weighting, segment feature mixup and their sum.

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::data::PseudoLabelSet;
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::tensor::{Elem, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    Hard,
    Soft,
}

impl std::str::FromStr for LabelMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "hard" | "binary" => Ok(Self::Hard),
            "soft" => Ok(Self::Soft),
            other => Err(format!("unknown label mode {other:?} (expected soft or hard)")),
        }
    }
}

impl std::fmt::Display for LabelMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Hard => "hard",
            Self::Soft => "soft",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MixupConfig {
    /// Concentration of the symmetric Beta distribution of the mixing weight.
    pub alpha: f64,
    /// Draw one weight per pair instead of one per step.
    pub per_pair_lambda: bool,
    /// Round the interpolated targets' endpoints up to {0, 1} first.
    pub ceil_labels: bool,
}

impl Default for MixupConfig {
    fn default() -> Self {
        Self {
            alpha: 1.7,
            per_pair_lambda: false,
            ceil_labels: false,
        }
    }
}

impl MixupConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() || self.alpha <= 0.0 {
            return Err(Error::Config(format!("mixup alpha must be positive, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Which terms make up the stage-two objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveConfig {
    pub label_mode: LabelMode,
    pub reweight: bool,
    pub class_weight_w: f64,
    pub mixup: bool,
    #[serde(flatten)]
    pub mixup_config: MixupConfig,
    /// Adds the unweighted hard-label loss on top of the default terms.
    pub include_hard: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            label_mode: LabelMode::Soft,
            reweight: true,
            class_weight_w: 0.5,
            mixup: true,
            mixup_config: MixupConfig::default(),
            include_hard: false,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.class_weight_w.is_finite() || self.class_weight_w < 0.0 {
            return Err(Error::Config(format!(
                "class weight multiplier must be non-negative, got {}",
                self.class_weight_w
            )));
        }
        self.mixup_config.validate()
    }
}

/// Pseudo-label targets of one video as `T x C` constants.
#[derive(Debug, Clone)]
pub struct PseudoTargets<E: Elem> {
    pub binary_visual: Tensor<E>,
    pub binary_audio: Tensor<E>,
    pub soft_visual: Tensor<E>,
    pub soft_audio: Tensor<E>,
}

fn grid_to_tensor<E: Elem, V: Copy + Into<f64>>(grid: &[Vec<V>]) -> Result<Tensor<E>> {
    let rows = grid.len();
    let cols = grid.first().map_or(0, Vec::len);
    let data = grid.iter().flatten().map(|&v| E::from_f64(v.into())).collect();
    Tensor::new(vec![rows, cols], data)
}

impl<E: Elem> PseudoTargets<E> {
    pub fn new(set: &PseudoLabelSet) -> Result<Self> {
        Ok(Self {
            binary_visual: grid_to_tensor(&set.binary_visual)?,
            binary_audio: grid_to_tensor(&set.binary_audio)?,
            soft_visual: grid_to_tensor(&set.soft_visual)?,
            soft_audio: grid_to_tensor(&set.soft_audio)?,
        })
    }

    pub fn for_mode(&self, mode: LabelMode) -> (&Tensor<E>, &Tensor<E>) {
        match mode {
            LabelMode::Hard => (&self.binary_visual, &self.binary_audio),
            LabelMode::Soft => (&self.soft_visual, &self.soft_audio),
        }
    }
}

/// `BCE(p_v, target_v) + BCE(p_a, target_a)`, each a mean over `T x C`.
pub fn pseudo_label_loss<E: Elem>(
    p_v: &Tensor<E>,
    p_a: &Tensor<E>,
    targets: &PseudoTargets<E>,
    mode: LabelMode,
) -> Result<Tensor<E>> {
    let (tv, ta) = targets.for_mode(mode);
    p_v.bce(tv, None)?.add(&p_a.bce(ta, None)?)
}

/// Label statistics behind a set of class-balance weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelStats {
    pub videos: usize,
    pub segments: usize,
    pub classes: usize,
    pub positive_visual: usize,
    pub positive_audio: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassBalanceWeights {
    pub visual_pos: f64,
    pub visual_neg: f64,
    pub audio_pos: f64,
    pub audio_neg: f64,
    pub w: f64,
    pub stats: LabelStats,
}

impl ClassBalanceWeights {
    /// All four weights equal to one.
    pub fn neutral() -> Self {
        Self {
            visual_pos: 1.0,
            visual_neg: 1.0,
            audio_pos: 1.0,
            audio_neg: 1.0,
            w: 1.0,
            stats: LabelStats {
                videos: 0,
                segments: 0,
                classes: 0,
                positive_visual: 0,
                positive_audio: 0,
            },
        }
    }
}

/// Positive weight = fraction of negative binary pseudo-labels times `w`,
/// negative weight = fraction of positive ones, per modality, over the whole
/// training set.
pub fn class_balance_weights<'a>(sets: impl IntoIterator<Item = &'a PseudoLabelSet>, w: f64) -> Result<ClassBalanceWeights> {
    let (mut videos, mut segments, mut classes) = (0usize, 0usize, 0usize);
    let (mut pos_v, mut pos_a, mut cells) = (0usize, 0usize, 0usize);
    for set in sets {
        videos += 1;
        segments = set.binary_visual.len();
        classes = set.binary_visual.first().map_or(0, Vec::len);
        cells += segments * classes;
        pos_v += set.binary_visual.iter().flatten().filter(|&&b| b == 1).count();
        pos_a += set.binary_audio.iter().flatten().filter(|&&b| b == 1).count();
    }
    if cells == 0 {
        return Err(Error::Config("class-balance weights need at least one labeled cell".into()));
    }
    let n = cells as f64;
    let (fv, fa) = (pos_v as f64 / n, pos_a as f64 / n);
    Ok(ClassBalanceWeights {
        visual_pos: (n - pos_v as f64) / n * w,
        visual_neg: fv,
        audio_pos: (n - pos_a as f64) / n * w,
        audio_neg: fa,
        w,
        stats: LabelStats {
            videos,
            segments,
            classes,
            positive_visual: pos_v,
            positive_audio: pos_a,
        },
    })
}

fn cell_weights<E: Elem>(y: &[u8], segments: usize, pos: f64, neg: f64) -> Result<Tensor<E>> {
    let row: Vec<E> = y
        .iter()
        .map(|&v| E::from_f64(if v == 1 { pos } else { neg }))
        .collect();
    Tensor::new(vec![segments, y.len()], row.repeat(segments))
}

/// Per modality, each cell's BCE is scaled by `w_pos` when the video label
/// of its class is 1 and by `w_neg` otherwise; the two modality means add.
pub fn weighted_soft_loss<E: Elem>(
    p_v: &Tensor<E>,
    p_a: &Tensor<E>,
    target_v: &Tensor<E>,
    target_a: &Tensor<E>,
    video_labels: &[u8],
    weights: &ClassBalanceWeights,
) -> Result<Tensor<E>> {
    let t = p_v.shape()[0];
    if p_v.shape() != [t, video_labels.len()] {
        return Err(Error::shape(format!(
            "predictions {:?} do not match {} video labels",
            p_v.shape(),
            video_labels.len()
        )));
    }
    let wv = cell_weights(video_labels, t, weights.visual_pos, weights.visual_neg)?;
    let wa = cell_weights(video_labels, t, weights.audio_pos, weights.audio_neg)?;
    p_v.bce(target_v, Some(&wv))?.add(&p_a.bce(target_a, Some(&wa))?)
}

/// Mixing weights and partner indices of one draw.
#[derive(Debug, Clone, PartialEq)]
pub struct MixupDraw {
    /// One value, or one per row when drawn per pair.
    pub lambda: Vec<f64>,
    /// Row `i` is mixed with row `pairing[i]`.
    pub pairing: Vec<usize>,
}

impl MixupDraw {
    pub fn lambda_at(&self, i: usize) -> f64 {
        if self.lambda.len() == 1 {
            self.lambda[0]
        } else {
            self.lambda[i]
        }
    }
}

/// Draws `lambda ~ Beta(alpha, alpha)` and a uniform permutation of `n` rows.
pub fn draw_mixup<R: Rng + ?Sized>(n: usize, cfg: &MixupConfig, rng: &mut R) -> Result<MixupDraw> {
    cfg.validate()?;
    let beta = Beta::new(cfg.alpha, cfg.alpha).map_err(|e| Error::Config(format!("mixup beta: {e}")))?;
    let count = if cfg.per_pair_lambda { n } else { 1 };
    let lambda = (0..count).map(|_| beta.sample(rng)).collect();
    let mut pairing: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(pairing.as_mut_slice(), rng);
    Ok(MixupDraw { lambda, pairing })
}

/// `lambda * x[i] + (1 - lambda) * x[pairing[i]]` over the rows of `x`.
pub fn mix_rows<E: Elem>(x: &Tensor<E>, draw: &MixupDraw) -> Result<Tensor<E>> {
    let partner = x.index_select(&draw.pairing)?;
    if draw.lambda.len() == 1 {
        let l = draw.lambda[0];
        return x.scale(l)?.add(&partner.scale(1.0 - l)?);
    }
    let width = x.shape()[1];
    let col = |f: &dyn Fn(f64) -> f64| -> Result<Tensor<E>> {
        let data: Vec<E> = draw
            .lambda
            .iter()
            .flat_map(|&l| std::iter::repeat_n(E::from_f64(f(l)), width))
            .collect();
        Tensor::new(x.shape().to_vec(), data)
    };
    x.mul(&col(&|l| l)?)?.add(&partner.mul(&col(&|l| 1.0 - l)?)?)
}

/// Interpolated targets for row-major `n x C` labels.
pub fn mix_labels(labels: &[f64], classes: usize, draw: &MixupDraw, ceil: bool) -> Vec<f64> {
    let lift = |v: f64| if ceil { v.ceil() } else { v };
    let mut out = Vec::with_capacity(labels.len());
    for (i, &j) in draw.pairing.iter().enumerate() {
        let l = draw.lambda_at(i);
        for c in 0..classes {
            out.push(l * lift(labels[i * classes + c]) + (1.0 - l) * lift(labels[j * classes + c]));
        }
    }
    out
}

/// Mixed features and targets of both modalities, sharing one draw.
pub struct MixupBatch<E: Elem> {
    pub features_visual: Tensor<E>,
    pub features_audio: Tensor<E>,
    pub labels_visual: Tensor<E>,
    pub labels_audio: Tensor<E>,
    pub draw: MixupDraw,
}

/// Mixes flattened segment features (`n x d`) and their targets (`n x C`).
pub fn sample_mixup<E: Elem, R: Rng + ?Sized>(
    features_visual: &Tensor<E>,
    features_audio: &Tensor<E>,
    labels_visual: &Tensor<E>,
    labels_audio: &Tensor<E>,
    cfg: &MixupConfig,
    rng: &mut R,
) -> Result<MixupBatch<E>> {
    let n = features_visual.shape()[0];
    if features_audio.shape()[0] != n || labels_visual.shape()[0] != n || labels_audio.shape() != labels_visual.shape() {
        return Err(Error::shape("mixup inputs disagree on the number of segments"));
    }
    let draw = draw_mixup(n, cfg, rng)?;
    mix_with(features_visual, features_audio, labels_visual, labels_audio, cfg, draw)
}

/// Applies a given draw (useful for fixed-pairing checks).
pub fn mix_with<E: Elem>(
    features_visual: &Tensor<E>,
    features_audio: &Tensor<E>,
    labels_visual: &Tensor<E>,
    labels_audio: &Tensor<E>,
    cfg: &MixupConfig,
    draw: MixupDraw,
) -> Result<MixupBatch<E>> {
    let classes = labels_visual.shape()[1];
    let lab = |t: &Tensor<E>| -> Result<Tensor<E>> {
        let mixed = mix_labels(&t.to_f64_vec(), classes, &draw, cfg.ceil_labels);
        Tensor::from_f64(t.shape().to_vec(), &mixed)
    };
    Ok(MixupBatch {
        features_visual: mix_rows(features_visual, &draw)?,
        features_audio: mix_rows(features_audio, &draw)?,
        labels_visual: lab(labels_visual)?,
        labels_audio: lab(labels_audio)?,
        draw,
    })
}

/// Shared classifier and sigmoid on mixed features, BCE against the mixed
/// targets, summed over modalities.
pub fn mixup_loss<E: Elem>(batch: &MixupBatch<E>, classifier: &Linear<E>) -> Result<Tensor<E>> {
    let pv = classifier.forward(&batch.features_visual)?.sigmoid()?;
    let pa = classifier.forward(&batch.features_audio)?.sigmoid()?;
    pv.bce(&batch.labels_visual, None)?.add(&pa.bce(&batch.labels_audio, None)?)
}

/// Unweighted sum of the loss terms.
pub fn total_loss<E: Elem>(components: &[Tensor<E>]) -> Result<Tensor<E>> {
    Tensor::add_n(components)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn set(bv: Vec<Vec<u8>>) -> PseudoLabelSet {
        let soft = bv.iter().map(|r| r.iter().map(|&b| b as f64).collect()).collect();
        PseudoLabelSet {
            binary_audio: bv.clone(),
            soft_visual: soft,
            soft_audio: bv.iter().map(|r| r.iter().map(|_| 0.0).collect()).collect(),
            binary_visual: bv,
            thresholds_visual: vec![],
            thresholds_audio: vec![],
        }
    }

    #[test]
    fn class_balance_hand_case() {
        let w = class_balance_weights([&set(vec![vec![1, 0], vec![0, 0]])], 0.5).unwrap();
        assert_eq!((w.visual_pos, w.visual_neg), (0.375, 0.25));
        assert_eq!(w.stats.positive_visual, 1);
        let all = class_balance_weights([&set(vec![vec![1, 1]])], 0.5).unwrap();
        assert_eq!((all.visual_pos, all.visual_neg), (0.0, 1.0));
        let none = class_balance_weights([&set(vec![vec![0, 0]])], 0.5).unwrap();
        assert_eq!((none.visual_pos, none.visual_neg), (0.5, 0.0));
        assert!(class_balance_weights(std::iter::empty(), 0.5).is_err());
    }

    fn probs(seed: u64, t: usize, c: usize) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..t * c).map(|_| rng.random_range(0.05..0.95)).collect();
        Tensor::from_f64([t, c], &v).unwrap()
    }

    #[test]
    fn weighted_loss_collapses_to_scaled_soft_loss() {
        let (pv, pa, tv, ta) = (probs(1, 4, 3), probs(2, 4, 3), probs(3, 4, 3), probs(4, 4, 3));
        let targets = PseudoTargets {
            binary_visual: tv.clone(),
            binary_audio: ta.clone(),
            soft_visual: tv.clone(),
            soft_audio: ta.clone(),
        };
        let plain = pseudo_label_loss(&pv, &pa, &targets, LabelMode::Soft).unwrap().item();
        let w = ClassBalanceWeights {
            visual_pos: 0.3,
            visual_neg: 0.7,
            audio_pos: 0.3,
            audio_neg: 0.7,
            ..ClassBalanceWeights::neutral()
        };
        let ones = weighted_soft_loss(&pv, &pa, &tv, &ta, &[1, 1, 1], &w).unwrap().item();
        let zeros = weighted_soft_loss(&pv, &pa, &tv, &ta, &[0, 0, 0], &w).unwrap().item();
        assert!((ones - 0.3 * plain).abs() < 1e-12);
        assert!((zeros - 0.7 * plain).abs() < 1e-12);
        let neutral = weighted_soft_loss(&pv, &pa, &tv, &ta, &[1, 0, 1], &ClassBalanceWeights::neutral()).unwrap();
        assert_eq!(neutral.item(), plain);
    }

    #[test]
    fn unit_lambda_mixup_is_exact() {
        let f = probs(5, 6, 4);
        let l = probs(6, 6, 2);
        let draw = MixupDraw {
            lambda: vec![1.0],
            pairing: vec![5, 4, 3, 2, 1, 0],
        };
        let b = mix_with(&f, &f, &l, &l, &MixupConfig::default(), draw).unwrap();
        assert_eq!(b.features_visual.to_vec(), f.to_vec());
        assert_eq!(b.labels_audio.to_vec(), l.to_vec());
    }

    #[test]
    fn self_pairing_keeps_rows_for_any_lambda() {
        let f = probs(7, 5, 3);
        let draw = MixupDraw {
            lambda: vec![0.3],
            pairing: (0..5).collect(),
        };
        let mixed = mix_rows(&f, &draw).unwrap().to_vec();
        for (a, b) in mixed.iter().zip(f.to_vec()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn mixed_labels_are_linear_in_lambda() {
        let labels = [0.2, 0.9, 0.6, 0.1];
        let at = |l: f64| {
            mix_labels(
                &labels,
                2,
                &MixupDraw {
                    lambda: vec![l],
                    pairing: vec![1, 0],
                },
                false,
            )
        };
        assert_eq!(at(1.0), labels.to_vec());
        assert_eq!(at(0.0), vec![0.6, 0.1, 0.2, 0.9]);
        let mid = at(0.5);
        for (m, (a, b)) in mid.iter().zip(at(1.0).iter().zip(at(0.0))) {
            assert!((m - 0.5 * (a + b)).abs() < 1e-7);
        }
    }

    #[test]
    fn ceil_labels_round_up_before_mixing() {
        let labels = [0.3, 0.0];
        let draw = MixupDraw {
            lambda: vec![0.25],
            pairing: vec![1, 0],
        };
        assert_eq!(mix_labels(&labels, 1, &draw, true), vec![0.25, 0.75]);
    }

    #[test]
    fn draws_respect_config() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(draw_mixup(4, &MixupConfig { alpha: 0.0, ..Default::default() }, &mut rng).is_err());
        let d = draw_mixup(10, &MixupConfig::default(), &mut rng).unwrap();
        assert_eq!(d.lambda.len(), 1);
        assert!(d.lambda[0] > 0.0 && d.lambda[0] < 1.0);
        let mut sorted = d.pairing.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
        let cfg = MixupConfig {
            per_pair_lambda: true,
            ..Default::default()
        };
        assert_eq!(draw_mixup(10, &cfg, &mut rng).unwrap().lambda.len(), 10);
    }

    #[test]
    fn total_is_the_plain_sum() {
        let parts: Vec<Tensor<f64>> = [0.2, 0.3, 0.1].iter().map(|&v| Tensor::scalar(v)).collect();
        assert!((total_loss(&parts).unwrap().item() - 0.6).abs() < 1e-15);
    }

    #[test]
    fn label_mode_parses() {
        assert_eq!("soft".parse::<LabelMode>().unwrap(), LabelMode::Soft);
        assert_eq!("hard".parse::<LabelMode>().unwrap(), LabelMode::Hard);
        assert!("fuzzy".parse::<LabelMode>().is_err());
    }
}

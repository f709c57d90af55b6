//! Training the inference model on pseudo-labels, and scoring it.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{load_checkpoint, save_checkpoint, save_epoch, CheckpointContent, CheckpointPolicy};
use super::trainer::{fit, EpochRecord, StepOutput, TrainConfig, TrainState};
use crate::data::{Dataset, DatasetMode, PseudoLabelFile, PseudoLabelSet};
use crate::error::{Error, Result};
use crate::han::{predict_segments, video_loss, BackboneInputs, HanConfig, HanModel, SegmentPredictions, CHECKPOINT_KIND};
use crate::metrics::{ave_accuracy, MetricReport, TypeScores, VideoGrids};
use crate::objectives::{
    class_balance_weights, mixup_loss, pseudo_label_loss, sample_mixup, weighted_soft_loss, ClassBalanceWeights,
    LabelMode, ObjectiveConfig, PseudoTargets,
};
use crate::tensor::{Elem, Tensor};

/// One training video as constants.
pub struct Stage2Item<E: Elem> {
    pub inputs: BackboneInputs<E>,
    pub targets: PseudoTargets<E>,
    pub video_labels: Vec<u8>,
    pub y: Tensor<E>,
}

/// Pairs every video with its pseudo-labels; any gap is an error.
pub fn pseudo_label_sets(dataset: &Dataset, labels: &PseudoLabelFile) -> Result<Vec<PseudoLabelSet>> {
    dataset
        .videos
        .iter()
        .map(|v| {
            let set = labels
                .get(v.id())
                .ok_or_else(|| Error::validation(v.id(), "no pseudo-labels for this training video"))?;
            set.validate(v.id(), &v.labels.video_labels)?;
            Ok(set)
        })
        .collect()
}

pub fn stage2_items<E: Elem>(dataset: &Dataset, sets: &[PseudoLabelSet]) -> Result<Vec<Stage2Item<E>>> {
    dataset
        .videos
        .iter()
        .zip(sets)
        .map(|(v, set)| {
            let y = &v.labels.video_labels;
            Ok(Stage2Item {
                inputs: BackboneInputs::from_bundle(&v.features)?,
                targets: PseudoTargets::new(set)?,
                video_labels: y.clone(),
                y: Tensor::from_f64(
                    [y.len()],
                    &y.iter().map(|&b| f64::from(b)).collect::<Vec<_>>(),
                )?,
            })
        })
        .collect()
}

/// Class-balance weights as configured: computed from the binary
/// pseudo-labels, or all ones when re-weighting is off.
pub fn objective_weights(obj: &ObjectiveConfig, sets: &[PseudoLabelSet]) -> Result<ClassBalanceWeights> {
    if obj.reweight {
        class_balance_weights(sets, obj.class_weight_w)
    } else {
        Ok(ClassBalanceWeights::neutral())
    }
}

/// Stage-two objective of a batch. Per-video terms are averaged over the
/// batch; mixup runs once over all its segments.
pub fn stage2_batch_loss<E: Elem, R: Rng + ?Sized>(
    model: &HanModel<E>,
    items: &[&Stage2Item<E>],
    obj: &ObjectiveConfig,
    weights: &ClassBalanceWeights,
    rng: &mut R,
) -> Result<StepOutput<E>> {
    if items.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let inv = 1.0 / items.len() as f64;
    let mut pseudo = Vec::with_capacity(items.len());
    let mut video = Vec::with_capacity(items.len());
    let mut hard = Vec::new();
    let (mut fv, mut fa, mut lv, mut la) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for item in items {
        let out = model.forward(&item.inputs)?;
        let (tv, ta) = item.targets.for_mode(obj.label_mode);
        pseudo.push(if obj.reweight {
            weighted_soft_loss(&out.probs_visual, &out.probs_audio, tv, ta, &item.video_labels, weights)?
        } else {
            pseudo_label_loss(&out.probs_visual, &out.probs_audio, &item.targets, obj.label_mode)?
        });
        if obj.include_hard && obj.label_mode != LabelMode::Hard {
            hard.push(pseudo_label_loss(&out.probs_visual, &out.probs_audio, &item.targets, LabelMode::Hard)?);
        }
        video.push(video_loss(&out.pool.video_probs, &item.y)?);
        if obj.mixup {
            fv.push(out.features_visual);
            fa.push(out.features_audio);
            lv.push(tv.clone());
            la.push(ta.clone());
        }
    }
    let pseudo = Tensor::add_n(&pseudo)?.scale(inv)?;
    let video = Tensor::add_n(&video)?.scale(inv)?;
    let mut components = vec![("pseudo", pseudo.item().as_f64()), ("video", video.item().as_f64())];
    let mut terms = vec![pseudo, video];
    if !hard.is_empty() {
        let h = Tensor::add_n(&hard)?.scale(inv)?;
        components.push(("hard", h.item().as_f64()));
        terms.push(h);
    }
    if obj.mixup {
        let batch = sample_mixup(
            &Tensor::concat(&fv, 0)?,
            &Tensor::concat(&fa, 0)?,
            &Tensor::concat(&lv, 0)?,
            &Tensor::concat(&la, 0)?,
            &obj.mixup_config,
            rng,
        )?;
        let m = mixup_loss(&batch, &model.classifier)?;
        components.push(("mix", m.item().as_f64()));
        terms.push(m);
    }
    Ok(StepOutput {
        loss: Tensor::add_n(&terms)?,
        components,
    })
}

/// Held-out data scored after every epoch for best-epoch selection.
pub struct Validation<'a> {
    pub dataset: &'a Dataset,
    pub tau: f64,
    pub iou_threshold: f64,
}

pub struct Stage2Options<'a> {
    pub objective: ObjectiveConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub checkpoint: Option<&'a CheckpointPolicy>,
    /// Keeps the epoch with the highest segment Type score in `best/`
    /// under the checkpoint root.
    pub validation: Option<Validation<'a>>,
}

pub struct Stage2Outcome<E: Elem> {
    pub log: Vec<EpochRecord>,
    pub state: TrainState<E>,
    pub weights: ClassBalanceWeights,
    /// Per-epoch held-out segment scores when validating.
    pub validation: Vec<TypeScores>,
    /// `(epochs_done, segment Type)` of the best epoch.
    pub best: Option<(usize, f64)>,
}

/// Trains `model` on `dataset` with its pseudo-labels for the remaining
/// epochs of `state` (a fresh state when `None`).
pub fn run_stage2_training<E: Elem>(
    model: &HanModel<E>,
    dataset: &Dataset,
    labels: &PseudoLabelFile,
    opts: &Stage2Options<'_>,
    state: Option<TrainState<E>>,
    mut on_epoch: impl FnMut(&EpochRecord, Option<&TypeScores>),
) -> Result<Stage2Outcome<E>> {
    opts.objective.validate()?;
    if dataset.num_classes() != model.config.num_classes {
        return Err(Error::Config(format!(
            "model predicts {} classes, dataset has {}",
            model.config.num_classes,
            dataset.num_classes()
        )));
    }
    let sets = pseudo_label_sets(dataset, labels)?;
    let weights = objective_weights(&opts.objective, &sets)?;
    let items = stage2_items::<E>(dataset, &sets)?;
    drop(sets);
    let class_names = dataset.vocab.class_names.clone();
    let mut state = state.unwrap_or_else(|| TrainState::fresh(&opts.train));
    let mut scores = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    let log = fit(
        model,
        items.len(),
        &opts.train,
        opts.seed,
        &mut state,
        |batch, rng| {
            let chosen: Vec<&Stage2Item<E>> = batch.iter().map(|&i| &items[i]).collect();
            stage2_batch_loss(model, &chosen, &opts.objective, &weights, rng)
        },
        |record, st| {
            let content = CheckpointContent {
                kind: CHECKPOINT_KIND,
                config: &model.config,
                class_names: &class_names,
                epochs_done: st.next_epoch,
                optimizer: Some(&st.optimizer),
            };
            if let Some(policy) = opts.checkpoint {
                save_epoch(policy, model, &content)?;
            }
            let mut seen = None;
            if let Some(v) = &opts.validation {
                let report = evaluate(model, v.dataset, v.tau, v.iou_threshold)?;
                let s = report.segment;
                if best.is_none_or(|(_, b)| s.type_av > b) {
                    best = Some((st.next_epoch, s.type_av));
                    if let Some(policy) = opts.checkpoint {
                        save_checkpoint(&policy.dir.join("best"), model, &content)?;
                    }
                }
                scores.push(s);
                seen = scores.last();
            }
            on_epoch(record, seen);
            Ok(())
        },
    )?;
    Ok(Stage2Outcome {
        log,
        state,
        weights,
        validation: scores,
        best,
    })
}

pub fn predict_dataset<E: Elem>(model: &HanModel<E>, dataset: &Dataset) -> Result<Vec<SegmentPredictions>> {
    dataset
        .videos
        .iter()
        .map(|v| Ok(model.forward(&BackboneInputs::from_bundle(&v.features)?)?.predictions()))
        .collect()
}

/// Scores predictions thresholded at `tau` against the attached ground
/// truth. AVE-style datasets also get the single-label accuracy.
pub fn score_predictions(
    dataset: &Dataset,
    preds: &[SegmentPredictions],
    tau: f64,
    iou_threshold: f64,
) -> Result<MetricReport> {
    if !dataset.has_ground_truth() {
        return Err(Error::Mode("dataset has no segment-level ground truth attached".into()));
    }
    let binary: Vec<_> = preds.iter().map(|p| predict_segments(p, tau)).collect();
    let ids: Vec<String> = dataset.videos.iter().map(|v| v.id().to_string()).collect();
    let grids: Vec<VideoGrids<'_>> = dataset
        .videos
        .iter()
        .zip(&binary)
        .map(|(v, b)| VideoGrids {
            pred_visual: &b.visual,
            pred_audio: &b.audio,
            gt_visual: v.labels.segment_visual.as_ref().expect("checked above"),
            gt_audio: v.labels.segment_audio.as_ref().expect("checked above"),
        })
        .collect();
    let mut report = MetricReport::build(&ids, &grids, iou_threshold)?;
    if dataset.mode == DatasetMode::Ave {
        let gt: Option<Vec<_>> = dataset.videos.iter().map(|v| v.labels.segment_single.clone()).collect();
        if let Some(gt) = gt {
            report.ave_accuracy = Some(ave_accuracy(preds, &gt, tau)?);
        }
    }
    Ok(report)
}

pub fn evaluate<E: Elem>(model: &HanModel<E>, dataset: &Dataset, tau: f64, iou_threshold: f64) -> Result<MetricReport> {
    score_predictions(dataset, &predict_dataset(model, dataset)?, tau, iou_threshold)
}

/// Segment probabilities and thresholded decisions in the pseudo-label file
/// layout; the thresholds hold `tau` for every class.
pub fn prediction_dump(dataset: &Dataset, preds: &[SegmentPredictions], tau: f64) -> PseudoLabelFile {
    let c = dataset.num_classes();
    let mut file = PseudoLabelFile::new(&vec![tau; c], &vec![tau; c], None);
    for (v, p) in dataset.videos.iter().zip(preds) {
        let b = predict_segments(p, tau);
        let soft = |probs: &[f64]| probs.chunks(c).map(<[f64]>::to_vec).collect();
        file.insert(
            v.id(),
            &PseudoLabelSet {
                binary_visual: b.visual,
                binary_audio: b.audio,
                soft_visual: soft(&p.visual_probs),
                soft_audio: soft(&p.audio_probs),
                thresholds_visual: vec![tau; c],
                thresholds_audio: vec![tau; c],
            },
        );
    }
    file
}

/// Loads an inference-model checkpoint and checks it against the dataset's
/// vocabulary.
pub fn load_han(dir: &Path, dataset: Option<&Dataset>) -> Result<HanModel<f32>> {
    let ckpt = load_checkpoint(dir)?;
    ckpt.expect_kind(CHECKPOINT_KIND)?;
    if let Some(ds) = dataset {
        if ckpt.index.class_names != ds.vocab.class_names {
            return Err(Error::Config(format!(
                "vocabulary mismatch: checkpoint {} was trained on {:?}, dataset has {:?}",
                dir.display(),
                ckpt.index.class_names,
                ds.vocab.class_names
            )));
        }
    }
    let config: HanConfig = ckpt.config()?;
    let model = HanModel::new(&mut ChaCha8Rng::seed_from_u64(0), config)?;
    ckpt.restore_params(&model)?;
    Ok(model)
}

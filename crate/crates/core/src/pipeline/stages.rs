//! One entry point per pipeline stage. Each reads what its [`RunConfig`]
//! points at and writes everything under an output directory:
//!
//! ```text
//! out/pretrain/{epoch_NNN,final}/   pseudo-labeler checkpoints
//! out/pretrain/log.jsonl
//! out/pseudo_labels.json
//! out/train/{epoch_NNN,final,best}/ inference-model checkpoints
//! out/train/log.jsonl
//! out/eval/{report.json,predictions.json,table.txt}
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{latest_epoch_dir, load_checkpoint, save_checkpoint, CheckpointContent, CheckpointPolicy};
use super::config::{LogLine, LogRecord, RunConfig, RunLog, Stage};
use super::stage2::{load_han, predict_dataset, prediction_dump, run_stage2_training, score_predictions, Stage2Options, Validation};
use super::trainer::{EpochRecord, TrainState};
use crate::data::{load_manifest, read_ground_truth, read_pseudo_labels, write_pseudo_labels, Dataset};
use crate::error::{Error, Result};
use crate::han::{HanConfig, HanModel};
use crate::metrics::MetricReport;
use crate::nn::Module;
use crate::pseudolabel::{emit_pseudo_labels, run_pretraining, PseudoLabelerConfig, PseudoLabelerModel, CHECKPOINT_KIND};
use crate::tensor::Elem;

pub const PRETRAIN_DIR: &str = "pretrain";
pub const TRAIN_DIR: &str = "train";
pub const EVAL_DIR: &str = "eval";
pub const FINAL_DIR: &str = "final";
pub const BEST_DIR: &str = "best";
pub const PSEUDO_LABEL_FILE: &str = "pseudo_labels.json";
pub const LOG_FILE: &str = "log.jsonl";

/// Where a training stage left its model and log.
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub epochs: Vec<EpochRecord>,
}

impl TrainSummary {
    /// One line per epoch: index, learning rate and loss parts.
    pub fn loss_table(&self) -> String {
        let mut out = String::new();
        for r in &self.epochs {
            let parts: Vec<String> = r.losses.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
            out.push_str(&format!("epoch {:>3}  lr {:.2e}  {}\n", r.epoch, r.lr, parts.join("  ")));
        }
        out
    }
}

fn required<'a>(path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| Error::Config(format!("no {what} given")))
}

fn existing(path: &Path) -> Result<&Path> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::Missing(path.to_path_buf()))
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads a manifest and, when given, merges its ground-truth sidecar.
pub fn load_with_ground_truth(manifest: &Path, ground_truth: Option<&Path>) -> Result<Dataset> {
    let mut ds = load_manifest(manifest)?;
    if let Some(gt) = ground_truth {
        ds.attach_ground_truth(&read_ground_truth(gt)?)?;
    }
    Ok(ds)
}

/// Rng for parameter initialization. Uses stream 0; epoch streams start at 1.
fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Restores parameters and optimizer state from `dir` (a checkpoint or a
/// root holding `epoch_NNN` directories).
fn resume_state<E: Elem>(
    dir: &Path,
    kind: &str,
    model: &impl Module<E>,
    cfg: &super::trainer::TrainConfig,
) -> Result<TrainState<E>> {
    let dir = match latest_epoch_dir(dir)? {
        Some(d) if !dir.join(super::checkpoint::INDEX_FILE).exists() => d,
        _ => dir.to_path_buf(),
    };
    let ckpt = load_checkpoint(&dir)?;
    ckpt.expect_kind(kind)?;
    ckpt.restore_params(model)?;
    Ok(TrainState {
        optimizer: ckpt.optimizer(cfg.optimizer),
        next_epoch: ckpt.index.epochs_done,
    })
}

fn open_log(root: &Path, stage: Stage, cfg: &RunConfig) -> Result<RunLog> {
    let mut log = RunLog::create(&root.join(LOG_FILE))?;
    log.append(&LogLine::Config {
        stage,
        config: Box::new(cfg.clone()),
    })?;
    write_text(&root.join("config.json"), &cfg.to_json())?;
    Ok(log)
}

/// Pre-trains the pseudo-labeler on `cfg.supervised_manifest`.
pub fn run_pretrain_stage(cfg: &RunConfig, out: &Path, mut progress: impl FnMut(&EpochRecord)) -> Result<TrainSummary> {
    cfg.validate()?;
    let dataset = load_manifest(existing(required(&cfg.supervised_manifest, "supervised manifest")?)?)?;
    let root = out.join(PRETRAIN_DIR);
    let mut log = open_log(&root, Stage::Pretrain, cfg)?;
    let model_cfg = PseudoLabelerConfig::for_dataset(&dataset, cfg.encoder);
    let model = PseudoLabelerModel::<f32>::new(&mut init_rng(cfg.seed), model_cfg)?;
    let state = cfg
        .resume
        .as_deref()
        .map(|dir| resume_state(dir, CHECKPOINT_KIND, &model, &cfg.pretrain))
        .transpose()?;
    let policy = CheckpointPolicy {
        dir: root.clone(),
        keep: cfg.keep_checkpoints,
    };
    let mut log_err = None;
    let outcome = run_pretraining(&model, &dataset, &cfg.pretrain, cfg.seed, Some(&policy), state, |r| {
        progress(r);
        let line = LogLine::Epoch(LogRecord {
            stage: Stage::Pretrain,
            epoch: r.clone(),
            eval: None,
        });
        if let Err(e) = log.append(&line) {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(e);
    }
    let final_dir = root.join(FINAL_DIR);
    save_checkpoint(
        &final_dir,
        &model,
        &CheckpointContent {
            kind: CHECKPOINT_KIND,
            config: &model.config,
            class_names: &dataset.vocab.class_names,
            epochs_done: outcome.state.next_epoch,
            optimizer: Some(&outcome.state.optimizer),
        },
    )?;
    log.append(&LogLine::Final {
        stage: Stage::Pretrain,
        artifact: final_dir.clone(),
    })?;
    Ok(TrainSummary {
        checkpoint: final_dir,
        log: root.join(LOG_FILE),
        epochs: outcome.log,
    })
}

pub fn load_pseudo_labeler(dir: &Path) -> Result<PseudoLabelerModel<f32>> {
    let ckpt = load_checkpoint(dir)?;
    ckpt.expect_kind(CHECKPOINT_KIND)?;
    let config: PseudoLabelerConfig = ckpt.config()?;
    let model = PseudoLabelerModel::new(&mut init_rng(0), config)?;
    ckpt.restore_params(&model)?;
    Ok(model)
}

/// Calibrates thresholds on `cfg.manifest` with the checkpointed
/// pseudo-labeler and writes the labels of every video.
pub fn run_pseudo_label_stage(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    let ckpt_dir = cfg
        .checkpoint
        .clone()
        .unwrap_or_else(|| out.join(PRETRAIN_DIR).join(FINAL_DIR));
    let model = load_pseudo_labeler(existing(&ckpt_dir)?)?;
    let manifest = existing(required(&cfg.manifest, "training manifest")?)?;
    let dataset = load_manifest(manifest)?;
    let ckpt_names = load_checkpoint(&ckpt_dir)?.index.class_names;
    if ckpt_names != dataset.vocab.class_names {
        return Err(Error::Config(format!(
            "vocabulary mismatch between pseudo-labeler {} and {}",
            ckpt_dir.display(),
            manifest.display()
        )));
    }
    let (file, _) = emit_pseudo_labels(&model, &dataset, cfg.quantile, &manifest.display().to_string())?;
    let path = out.join(PSEUDO_LABEL_FILE);
    write_pseudo_labels(&path, &file)?;
    Ok(path)
}

/// Trains the inference model on `cfg.manifest` with the pseudo-labels at
/// `cfg.pseudo_labels`.
pub fn run_train_stage(
    cfg: &RunConfig,
    out: &Path,
    mut progress: impl FnMut(&EpochRecord, Option<&crate::metrics::TypeScores>),
) -> Result<TrainSummary> {
    let labels_path = cfg.pseudo_labels.clone().unwrap_or_else(|| out.join(PSEUDO_LABEL_FILE));
    existing(&labels_path)?;
    cfg.validate()?;
    let dataset = load_manifest(existing(required(&cfg.manifest, "training manifest")?)?)?;
    let labels = read_pseudo_labels(&labels_path, &dataset)?;
    let validation_set = if cfg.select_best {
        let m = required(&cfg.eval_manifest, "evaluation manifest for best-epoch selection")?;
        let g = required(&cfg.eval_ground_truth, "evaluation ground truth for best-epoch selection")?;
        Some(load_with_ground_truth(m, Some(g))?)
    } else {
        None
    };
    let (dv, da, _, _) = dataset.dims();
    let han_cfg = HanConfig {
        dim_visual: dv,
        dim_audio: da,
        hidden: cfg.model.hidden,
        heads: cfg.model.heads,
        num_classes: dataset.num_classes(),
    };
    let model = HanModel::<f32>::new(&mut init_rng(cfg.seed), han_cfg)?;
    let root = out.join(TRAIN_DIR);
    let mut log = open_log(&root, Stage::Train, cfg)?;
    let state = cfg
        .resume
        .as_deref()
        .map(|dir| resume_state(dir, crate::han::CHECKPOINT_KIND, &model, &cfg.train))
        .transpose()?;
    let policy = CheckpointPolicy {
        dir: root.clone(),
        keep: cfg.keep_checkpoints,
    };
    let opts = Stage2Options {
        objective: cfg.objective,
        train: cfg.train.clone(),
        seed: cfg.seed,
        checkpoint: Some(&policy),
        validation: validation_set.as_ref().map(|d| Validation {
            dataset: d,
            tau: cfg.tau,
            iou_threshold: cfg.iou_threshold,
        }),
    };
    let mut log_err = None;
    let outcome = run_stage2_training(&model, &dataset, &labels, &opts, state, |r, eval| {
        progress(r, eval);
        let line = LogLine::Epoch(LogRecord {
            stage: Stage::Train,
            epoch: r.clone(),
            eval: eval.copied(),
        });
        if let Err(e) = log.append(&line) {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(e);
    }
    let final_dir = root.join(FINAL_DIR);
    save_checkpoint(
        &final_dir,
        &model,
        &CheckpointContent {
            kind: crate::han::CHECKPOINT_KIND,
            config: &model.config,
            class_names: &dataset.vocab.class_names,
            epochs_done: outcome.state.next_epoch,
            optimizer: Some(&outcome.state.optimizer),
        },
    )?;
    let chosen = if cfg.select_best && outcome.best.is_some() {
        root.join(BEST_DIR)
    } else {
        final_dir
    };
    log.append(&LogLine::Final {
        stage: Stage::Train,
        artifact: chosen.clone(),
    })?;
    Ok(TrainSummary {
        checkpoint: chosen,
        log: root.join(LOG_FILE),
        epochs: outcome.log,
    })
}

/// Scores a trained inference model on `cfg.eval_manifest` (falling back to
/// `cfg.manifest`) with its ground-truth sidecar.
pub fn run_eval_stage(cfg: &RunConfig, out: &Path) -> Result<MetricReport> {
    cfg.validate()?;
    let ckpt_dir = cfg.checkpoint.clone().unwrap_or_else(|| out.join(TRAIN_DIR).join(FINAL_DIR));
    let manifest = match (&cfg.eval_manifest, &cfg.manifest) {
        (Some(m), _) | (None, Some(m)) => m.as_path(),
        (None, None) => return Err(Error::Config("no evaluation manifest given".into())),
    };
    let gt = existing(required(&cfg.eval_ground_truth, "evaluation ground-truth sidecar")?)?;
    let dataset = load_with_ground_truth(existing(manifest)?, Some(gt))?;
    let model = load_han(existing(&ckpt_dir)?, Some(&dataset))?;
    let preds = predict_dataset(&model, &dataset)?;
    let report = score_predictions(&dataset, &preds, cfg.tau, cfg.iou_threshold)?;
    let root = out.join(EVAL_DIR);
    write_text(&root.join("report.json"), &report.to_json())?;
    write_text(&root.join("table.txt"), &report.table())?;
    write_pseudo_labels(&root.join("predictions.json"), &prediction_dump(&dataset, &preds, cfg.tau))?;
    Ok(report)
}

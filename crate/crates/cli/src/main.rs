//! `uwav`: synthetic data, pre-training, pseudo-labeling, training,
//! evaluation and gradient checks from the command line.
//!
//! Every subcommand reads an optional JSON config, applies flag overrides on
//! top (flags win) and writes its artifacts under `--out`. Paths that are not
//! given default to the layout `synth` produces in the same directory, so
//!
//! ```text
//! uwav synth --mode weak --n 200 --seed 7 --out run
//! uwav pseudo-label --out run
//! uwav train --out run
//! uwav eval --out run
//! ```
//!
//! runs the whole pipeline. Exit codes: 0 success, 1 usage or validation
//! failure, 2 non-finite values during computation.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use uwav_core::data::{synth_dataset, DatasetMode, SynthConfig};
use uwav_core::objectives::{LabelMode, ObjectiveConfig};
use uwav_core::pipeline::{
    gradcheck_suite, run_eval_stage, run_pretrain_stage, run_pseudo_label_stage, run_train_stage, RunConfig, Stage,
    TrainConfig, TrainSummary,
};
use uwav_core::attention::EncoderConfig;

/// Directory under `--out` holding the supervised companion set written by
/// `synth` in weak and AVE modes.
const SUPERVISED_DIR: &str = "supervised";

fn with_default(text: &str, value: impl std::fmt::Display) -> String {
    format!("{text} [default: {value}]")
}

#[derive(Parser, Debug)]
#[command(name = "uwav", version, about = "Weakly-supervised audio-visual video parsing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with planted segment-level events.
    Synth(SynthArgs),
    /// Pre-train the temporal pseudo-label generator on a supervised set.
    Pretrain(RunArgs),
    /// Emit segment-level pseudo-labels for the weak training set.
    /// Pre-trains first when no pseudo-labeler checkpoint exists.
    PseudoLabel(RunArgs),
    /// Train the inference model on pseudo-labels.
    Train(RunArgs),
    /// Score a trained inference model against held-out ground truth.
    Eval(RunArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Supervised,
    Weak,
    Ave,
}

impl From<ModeArg> for DatasetMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Supervised => DatasetMode::Supervised,
            ModeArg::Weak => DatasetMode::Weak,
            ModeArg::Ave => DatasetMode::Ave,
        }
    }
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, value_enum, default_value = "weak")]
    mode: ModeArg,
    /// Training videos.
    #[arg(long, default_value_t = 200)]
    n: usize,
    /// Held-out evaluation videos (weak and AVE modes).
    #[arg(long, default_value_t = 100)]
    n_eval: usize,
    #[arg(long, default_value_t = 8)]
    classes: usize,
    /// Per-dimension Gaussian feature noise.
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
    /// Width of every feature space.
    #[arg(long, default_value_t = 32)]
    dim: usize,
    /// Only audio-visual events (no uni-modal ones).
    #[arg(long)]
    no_misalignment: bool,
    /// Skip the supervised companion set written next to weak and AVE data.
    #[arg(long)]
    no_companion: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// JSON config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, help = with_default("Seed for initialization, shuffling and mixup", 0))]
    seed: Option<u64>,
    /// Output directory; also where default inputs are looked up.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Print the effective config and exit.
    #[arg(long)]
    dry_run: bool,

    /// Weakly-labeled training manifest [default: OUT/manifest.json].
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Supervised pre-training manifest [default: OUT/supervised/manifest.json].
    #[arg(long)]
    supervised_manifest: Option<PathBuf>,
    /// Evaluation manifest [default: OUT/eval_manifest.json, else the training manifest].
    #[arg(long)]
    eval_manifest: Option<PathBuf>,
    /// Ground-truth sidecar of the evaluation manifest.
    #[arg(long)]
    eval_gt: Option<PathBuf>,
    /// Pseudo-label file [default: OUT/pseudo_labels.json].
    #[arg(long)]
    pseudo_labels: Option<PathBuf>,
    /// Checkpoint directory to load.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Checkpoint directory (or stage directory) to resume training from.
    #[arg(long)]
    resume: Option<PathBuf>,

    #[command(flatten)]
    train: TrainFlags,
    #[command(flatten)]
    objective: ObjectiveFlags,

    #[arg(long, help = with_default("Encoder blocks of the pseudo-label generator", EncoderConfig::default().blocks))]
    blocks: Option<usize>,
    #[arg(long, help = with_default("Quantile for class-wise threshold calibration", RunConfig::default().quantile))]
    quantile: Option<f64>,
    #[arg(long, help = with_default("Probability threshold for segment predictions", RunConfig::default().tau))]
    tau: Option<f64>,
    #[arg(long, help = with_default("Temporal IoU for event-level matching", RunConfig::default().iou_threshold))]
    iou_threshold: Option<f64>,
    #[arg(long, help = with_default("Epoch checkpoints kept on disk (0 keeps all)", RunConfig::default().keep_checkpoints))]
    keep_checkpoints: Option<usize>,
    /// Keep the epoch with the best held-out Type score (needs evaluation data).
    #[arg(long)]
    select_best: bool,
}

#[derive(Args, Debug)]
struct TrainFlags {
    #[arg(long, help = with_default("Videos per batch", TrainConfig::inference().batch_size))]
    batch_size: Option<usize>,
    #[arg(long, help = with_default("Training epochs", TrainConfig::inference().epochs))]
    epochs: Option<usize>,
    #[arg(long, help = with_default("Peak learning rate", TrainConfig::inference().peak_lr))]
    lr: Option<f64>,
    #[arg(long, help = "Final learning rate of the cosine decay [default: 1e-5 pre-training, 5e-6 training]")]
    min_lr: Option<f64>,
    #[arg(long, help = with_default("Linear warmup epochs", TrainConfig::inference().warmup_epochs))]
    warmup_epochs: Option<usize>,
    #[arg(long, help = with_default("AdamW decoupled weight decay", TrainConfig::inference().optimizer.weight_decay))]
    weight_decay: Option<f64>,
    #[arg(long, help = with_default("Global gradient-norm clip", TrainConfig::inference().clip_norm))]
    clip_norm: Option<f64>,
}

#[derive(Args, Debug)]
struct ObjectiveFlags {
    #[arg(long, help = with_default("Mixup Beta concentration", ObjectiveConfig::default().mixup_config.alpha))]
    alpha: Option<f64>,
    #[arg(long, help = with_default("Class-balance weight multiplier", ObjectiveConfig::default().class_weight_w))]
    class_weight_w: Option<f64>,
    #[arg(long, help = with_default("Pseudo-label targets: soft or hard", ObjectiveConfig::default().label_mode))]
    label_mode: Option<LabelMode>,
    /// Disable feature mixup.
    #[arg(long)]
    no_mixup: bool,
    /// Disable class-balanced re-weighting.
    #[arg(long)]
    no_reweight: bool,
    /// Round mixed targets up to binary endpoints (AVE variant).
    #[arg(long)]
    ceil_labels: bool,
    /// Add the unweighted hard-label loss.
    #[arg(long)]
    include_hard: bool,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn existing(path: PathBuf) -> Option<PathBuf> {
    path.exists().then_some(path)
}

impl TrainFlags {
    fn apply(&self, t: &mut TrainConfig) {
        set(&mut t.batch_size, self.batch_size);
        set(&mut t.epochs, self.epochs);
        set(&mut t.peak_lr, self.lr);
        set(&mut t.min_lr, self.min_lr);
        set(&mut t.warmup_epochs, self.warmup_epochs);
        set(&mut t.optimizer.weight_decay, self.weight_decay);
        set(&mut t.clip_norm, self.clip_norm);
    }
}

impl RunArgs {
    /// Config file, then flags, then defaults for paths still unset.
    fn effective(&self, stage: Stage) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
            None => RunConfig::default(),
        };
        cfg.stage = stage;
        set(&mut cfg.seed, self.seed);
        for (slot, flag) in [
            (&mut cfg.manifest, &self.manifest),
            (&mut cfg.supervised_manifest, &self.supervised_manifest),
            (&mut cfg.eval_manifest, &self.eval_manifest),
            (&mut cfg.eval_ground_truth, &self.eval_gt),
            (&mut cfg.pseudo_labels, &self.pseudo_labels),
            (&mut cfg.checkpoint, &self.checkpoint),
            (&mut cfg.resume, &self.resume),
        ] {
            if flag.is_some() {
                slot.clone_from(flag);
            }
        }
        match stage {
            Stage::Pretrain | Stage::PseudoLabel => self.train.apply(&mut cfg.pretrain),
            _ => self.train.apply(&mut cfg.train),
        }
        let o = &self.objective;
        set(&mut cfg.objective.mixup_config.alpha, o.alpha);
        set(&mut cfg.objective.class_weight_w, o.class_weight_w);
        set(&mut cfg.objective.label_mode, o.label_mode);
        cfg.objective.mixup &= !o.no_mixup;
        cfg.objective.reweight &= !o.no_reweight;
        cfg.objective.mixup_config.ceil_labels |= o.ceil_labels;
        cfg.objective.include_hard |= o.include_hard;
        set(&mut cfg.encoder.blocks, self.blocks);
        set(&mut cfg.quantile, self.quantile);
        set(&mut cfg.tau, self.tau);
        set(&mut cfg.iou_threshold, self.iou_threshold);
        set(&mut cfg.keep_checkpoints, self.keep_checkpoints);
        cfg.select_best |= self.select_best;
        self.fill_default_paths(stage, &mut cfg);
        Ok(cfg)
    }

    fn fill_default_paths(&self, stage: Stage, cfg: &mut RunConfig) {
        let out = &self.out;
        if cfg.manifest.is_none() {
            cfg.manifest = existing(out.join("manifest.json"));
        }
        if cfg.supervised_manifest.is_none() {
            cfg.supervised_manifest = existing(out.join(SUPERVISED_DIR).join("manifest.json"));
        }
        let wants_eval = stage == Stage::Eval || (stage == Stage::Train && cfg.select_best);
        if wants_eval && cfg.eval_manifest.is_none() {
            if let Some(m) = existing(out.join("eval_manifest.json")) {
                cfg.eval_manifest = Some(m);
                if cfg.eval_ground_truth.is_none() {
                    cfg.eval_ground_truth = existing(out.join("eval_gt.json"));
                }
            }
        }
        if stage == Stage::Eval && cfg.eval_ground_truth.is_none() && cfg.eval_manifest.is_none() {
            cfg.eval_ground_truth = existing(out.join("gt.json"));
        }
    }
}

fn print_training(summary: &TrainSummary) {
    print!("{}", summary.loss_table());
    println!("checkpoint: {}", summary.checkpoint.display());
    println!("log: {}", summary.log.display());
}

fn progress(epochs: usize) -> impl FnMut(&uwav_core::pipeline::EpochRecord) {
    move |r| {
        if r.epoch == 0 || (r.epoch + 1) % 10 == 0 || r.epoch + 1 == epochs {
            let total = r.losses.get("total").copied().unwrap_or(f64::NAN);
            eprintln!("epoch {:>3}/{epochs}  loss {total:.4}  {:.1}s", r.epoch + 1, r.wall_time_s);
        }
    }
}

fn run_synth(a: &SynthArgs) -> anyhow::Result<()> {
    let mode: DatasetMode = a.mode.into();
    let cfg = SynthConfig {
        mode,
        n_videos: a.n,
        n_eval: if mode == DatasetMode::Supervised { 0 } else { a.n_eval },
        num_classes: a.classes,
        noise: a.noise,
        dim_visual: a.dim,
        dim_audio: a.dim,
        dim_visual_embed: a.dim,
        dim_audio_embed: a.dim,
        misalignment: !a.no_misalignment && mode == DatasetMode::Weak,
        ..match mode {
            DatasetMode::Supervised => SynthConfig::supervised(a.n),
            DatasetMode::Weak => SynthConfig::weak(a.n, a.n_eval),
            DatasetMode::Ave => SynthConfig::ave(a.n, a.n_eval),
        }
    };
    let out = synth_dataset(&cfg, a.seed, &a.out)?;
    println!("manifest: {}", out.manifest.display());
    println!("ground truth: {}", out.ground_truth.display());
    if let (Some(m), Some(g)) = (&out.eval_manifest, &out.eval_ground_truth) {
        println!("eval manifest: {}", m.display());
        println!("eval ground truth: {}", g.display());
    }
    if mode != DatasetMode::Supervised && !a.no_companion {
        let sup = SynthConfig {
            n_videos: a.n,
            num_classes: a.classes,
            noise: a.noise,
            dim_visual: a.dim,
            dim_audio: a.dim,
            dim_visual_embed: a.dim,
            dim_audio_embed: a.dim,
            ..SynthConfig::supervised(a.n)
        };
        let companion = synth_dataset(&sup, a.seed.wrapping_add(1), &a.out.join(SUPERVISED_DIR))?;
        println!("supervised manifest: {}", companion.manifest.display());
    }
    Ok(())
}

fn pretrain_needed(cfg: &RunConfig, out: &Path) -> bool {
    cfg.checkpoint.is_none() && !out.join("pretrain").join("final").exists()
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth(a) => run_synth(&a),
        Command::Gradcheck(a) => {
            let report = gradcheck_suite(a.seed);
            print!("{}", report.table());
            if !report.passed() {
                bail!("gradient check failed: max relative error {:.3e}", report.max_rel_err());
            }
            Ok(())
        }
        Command::Pretrain(a) => {
            let cfg = a.effective(Stage::Pretrain)?;
            if a.dry_run {
                print!("{}", cfg.to_json());
                return Ok(());
            }
            let summary = run_pretrain_stage(&cfg, &a.out, progress(cfg.pretrain.epochs))?;
            print_training(&summary);
            Ok(())
        }
        Command::PseudoLabel(a) => {
            let cfg = a.effective(Stage::PseudoLabel)?;
            if a.dry_run {
                print!("{}", cfg.to_json());
                return Ok(());
            }
            if pretrain_needed(&cfg, &a.out) && cfg.supervised_manifest.is_some() {
                eprintln!("no pseudo-labeler checkpoint under {}; pre-training first", a.out.display());
                let pre = RunConfig { stage: Stage::Pretrain, ..cfg.clone() };
                let summary = run_pretrain_stage(&pre, &a.out, progress(cfg.pretrain.epochs))?;
                print_training(&summary);
            }
            let path = run_pseudo_label_stage(&cfg, &a.out)?;
            println!("pseudo-labels: {}", path.display());
            Ok(())
        }
        Command::Train(a) => {
            let cfg = a.effective(Stage::Train)?;
            if a.dry_run {
                print!("{}", cfg.to_json());
                return Ok(());
            }
            let mut log = progress(cfg.train.epochs);
            let summary = run_train_stage(&cfg, &a.out, |r, eval| {
                log(r);
                if let Some(s) = eval {
                    eprintln!("  held-out Type {:.1}", 100.0 * s.type_av);
                }
            })?;
            print_training(&summary);
            Ok(())
        }
        Command::Eval(a) => {
            let cfg = a.effective(Stage::Eval)?;
            if a.dry_run {
                print!("{}", cfg.to_json());
                return Ok(());
            }
            let report = run_eval_stage(&cfg, &a.out)?;
            print!("{}", report.table());
            Ok(())
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let numeric = err
        .chain()
        .filter_map(|e| e.downcast_ref::<uwav_core::Error>())
        .any(uwav_core::Error::is_numeric);
    if numeric {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

//! Orchestration of the two training stages, evaluation, checkpoints and
//! the finite-difference gradient suite.

pub mod checkpoint;
pub mod config;
pub mod gradcheck;
pub mod stage2;
pub mod stages;
pub mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointPolicy};
pub use config::{LogLine, LogRecord, ModelDims, RunConfig, RunLog, Stage};
pub use gradcheck::{gradcheck_suite, GradCheckReport};
pub use stage2::{evaluate, load_han, predict_dataset, run_stage2_training, Stage2Options, Validation};
pub use stages::{run_eval_stage, run_pretrain_stage, run_pseudo_label_stage, run_train_stage, TrainSummary};
pub use trainer::{epoch_rng, fit, EpochRecord, StepOutput, TrainConfig, TrainState};

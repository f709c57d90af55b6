//! End-to-end runs of the `uwav` binary.

use std::path::Path;
use std::process::{Command, Output};

fn uwav(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uwav"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}\nstdout:\n{}\nstderr:\n{}", o.status.code(), stdout(o), stderr(o));
}

const SHORT: [&str; 6] = ["--epochs", "3", "--warmup-epochs", "1", "--batch-size", "8"];

fn with_short(mut args: Vec<&str>) -> Vec<&str> {
    args.extend(SHORT);
    args
}

fn synth(out: &Path, n: &str) {
    let out = out.to_str().unwrap();
    ok(&uwav(&["synth", "--mode", "weak", "--n", n, "--n-eval", "12", "--seed", "7", "--out", out]));
}

#[test]
fn full_pipeline_exits_zero_and_prints_ten_columns() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    synth(dir.path(), "24");
    ok(&uwav(&with_short(vec!["pseudo-label", "--out", out])));
    assert!(dir.path().join("pseudo_labels.json").exists());
    let train = uwav(&with_short(vec!["train", "--out", out]));
    ok(&train);
    assert!(stdout(&train).contains("total="));
    let eval = uwav(&["eval", "--out", out]);
    ok(&eval);
    let text = stdout(&eval);
    let header = text.lines().next().unwrap();
    let columns: Vec<&str> = header.split_whitespace().collect();
    assert_eq!(
        columns,
        ["Seg-A", "Seg-V", "Seg-AV", "Seg-Type", "Seg-Event", "Evt-A", "Evt-V", "Evt-AV", "Evt-Type", "Evt-Event"]
    );
    let values: Vec<f64> = text.lines().nth(1).unwrap().split_whitespace().map(|v| v.parse().unwrap()).collect();
    assert_eq!(values.len(), 10);
    assert!(dir.path().join("eval/report.json").exists());
}

#[test]
fn train_without_pseudo_labels_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "6");
    let o = uwav(&["train", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("pseudo_labels.json"), "{}", stderr(&o));
}

#[test]
fn unknown_flags_are_usage_errors() {
    let o = uwav(&["train", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"));
}

#[test]
fn help_lists_defaults() {
    let o = uwav(&["train", "--help"]);
    ok(&o);
    let help = stdout(&o);
    for needle in [
        "Mixup Beta concentration [default: 1.7]",
        "Class-balance weight multiplier [default: 0.5]",
        "Encoder blocks of the pseudo-label generator [default: 5]",
        "Videos per batch [default: 64]",
        "Training epochs [default: 80]",
        "Peak learning rate [default: 0.0001]",
    ] {
        assert!(help.contains(needle), "missing {needle:?} in\n{help}");
    }
}

fn effective(args: &[&str]) -> serde_json::Value {
    let mut all = vec!["train", "--dry-run", "--out", "/nonexistent-uwav-out"];
    all.extend(args);
    let o = uwav(&all);
    ok(&o);
    serde_json::from_str(&stdout(&o)).unwrap()
}

#[test]
fn every_flag_changes_the_effective_config() {
    let base = effective(&[]);
    let cases: [(&[&str], &str, serde_json::Value); 19] = [
        (&["--seed", "9"], "/seed", 9.into()),
        (&["--alpha", "2.5"], "/objective/alpha", 2.5.into()),
        (&["--class-weight-w", "0.25"], "/objective/class_weight_w", 0.25.into()),
        (&["--label-mode", "hard"], "/objective/label_mode", "hard".into()),
        (&["--no-mixup"], "/objective/mixup", false.into()),
        (&["--no-reweight"], "/objective/reweight", false.into()),
        (&["--ceil-labels"], "/objective/ceil_labels", true.into()),
        (&["--include-hard"], "/objective/include_hard", true.into()),
        (&["--quantile", "0.3"], "/quantile", 0.3.into()),
        (&["--tau", "0.4"], "/tau", 0.4.into()),
        (&["--iou-threshold", "0.7"], "/iou_threshold", 0.7.into()),
        (&["--blocks", "3"], "/encoder/blocks", 3.into()),
        (&["--batch-size", "16"], "/train/batch_size", 16.into()),
        (&["--epochs", "12"], "/train/epochs", 12.into()),
        (&["--lr", "0.001"], "/train/peak_lr", 0.001.into()),
        (&["--min-lr", "0.0001"], "/train/min_lr", 0.0001.into()),
        (&["--warmup-epochs", "2"], "/train/warmup_epochs", 2.into()),
        (&["--weight-decay", "0.1"], "/train/optimizer/weight_decay", 0.1.into()),
        (&["--keep-checkpoints", "0"], "/keep_checkpoints", 0.into()),
    ];
    for (flags, pointer, want) in cases {
        let cfg = effective(flags);
        assert_ne!(base.pointer(pointer), Some(&want), "{flags:?} default already equals the override");
        assert_eq!(cfg.pointer(pointer), Some(&want), "{flags:?}");
    }
    assert_eq!(effective(&["--clip-norm", "0.5"]).pointer("/train/clip_norm"), Some(&0.5.into()));
    assert_eq!(effective(&["--select-best"]).pointer("/select_best"), Some(&true.into()));
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    std::fs::write(&path, r#"{"seed": 3, "objective": {"alpha": 0.5, "class_weight_w": 0.9}}"#).unwrap();
    let cfg = effective(&["--config", path.to_str().unwrap(), "--alpha", "4.0"]);
    assert_eq!(cfg["seed"], 3);
    assert_eq!(cfg["objective"]["alpha"], 4.0);
    assert_eq!(cfg["objective"]["class_weight_w"], 0.9);
}

#[test]
fn pretrain_flags_target_the_pretraining_schedule() {
    let o = uwav(&["pretrain", "--dry-run", "--out", "/nonexistent-uwav-out", "--epochs", "7"]);
    ok(&o);
    let cfg: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(cfg["pretrain"]["epochs"], 7);
    assert_eq!(cfg["train"]["epochs"], 80);
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    synth(dir.path(), "8");
    ok(&uwav(&with_short(vec!["pseudo-label", "--out", out])));
    ok(&uwav(&with_short(vec!["train", "--out", out])));
    let final_dir = dir.path().join("train/final");
    let tensor = std::fs::read_dir(&final_dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|e| e == "uwt"))
        .expect("checkpoint holds tensor files");
    let mut bytes = std::fs::read(&tensor).unwrap();
    bytes[..8].copy_from_slice(b"NOTATENS");
    std::fs::write(&tensor, bytes).unwrap();
    let o = uwav(&["eval", "--out", out]);
    assert_ne!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("magic"), "{}", stderr(&o));
}

#[test]
fn gradcheck_passes() {
    let o = uwav(&["gradcheck", "--seed", "1"]);
    ok(&o);
    assert!(stdout(&o).contains("encoder_stack"));
}

#[test]
fn diverging_training_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    ok(&uwav(&["synth", "--n", "8", "--n-eval", "4", "--out", out]));
    let o = uwav(&["pretrain", "--out", out, "--epochs", "2", "--warmup-epochs", "0", "--batch-size", "4", "--lr", "1e300"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"));
}

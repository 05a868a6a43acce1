use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 1
runs = 1

[synthetic]
num_subjects = 9
slices_per_volume = 2
dims = [24, 24]
intensity_ranges = [[0.25, 0.5], [0.62, 0.92], [0.15, 0.38], [0.52, 0.85]]

[preprocess]
target_dims = [16, 16]

[network]
input_dims = [16, 16]
base_channels = 4
max_channels = 8

[train]
phase1_iters = 4
phase2_iters = 4
refresh_period = 2
num_pseudo_steps = 2
validation_period = 2
batch_size = 4
labeled_per_batch = 2

[split]
n_labeled = 1
n_val = 1
n_test = 2
partition_seed = 0
"#;

fn locon(dir: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_locon"))
        .current_dir(dir)
        .env_remove("LOCON_SEED")
        .env("RUST_LOG", "warn")
        .args(["--config", "tiny.toml"])
        .args(args)
        .output()
        .unwrap();
    out
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = locon(dir, args);
    assert!(
        out.status.success(),
        "{args:?} exited {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn every_command_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("tiny.toml"), TINY).unwrap();

    ok(d, &["generate", "--out", "raw"]);
    assert!(d.join("raw/manifest.json").exists());
    ok(d, &["preprocess", "--input", "raw", "--out", "pre"]);
    ok(d, &["train", "--data", "pre", "--out", "run", "--mode", "proposed"]);
    for f in ["config.toml", "split.json", "phase1.ckpt", "final.ckpt", "best.ckpt", "metrics.jsonl", "train_summary.json"] {
        assert!(d.join("run").join(f).exists(), "missing {f}");
    }
    assert!(d.join("run/pseudo_labels").is_dir());

    ok(d, &["pseudo-label", "--checkpoint", "run/best.ckpt", "--data", "pre", "--out", "pl", "--consistency-threshold", "0.5"]);
    assert!(d.join("pl/consistency_scores.json").exists());
    let digest = ok(d, &["evaluate", "--checkpoint", "run/best.ckpt", "--data", "pre"]);
    assert!(digest.contains("foreground_mean"), "{digest}");
    assert!(d.join("run/eval_report.json").exists());
    ok(d, &["export-reps", "--checkpoint", "run/best.ckpt", "--data", "pre", "--out", "reps"]);
    assert!(d.join("reps").exists());

    ok(d, &["train", "--data", "pre", "--out", "base", "--mode", "baseline", "--init-backbone", "run/phase1.ckpt"]);
    ok(d, &["evaluate", "--checkpoint", "base/best.ckpt", "--data", "pre"]);
    let table = ok(d, &["report", "run", "base", "--out", "rep"]);
    assert!(table.contains("| proposed |") && table.contains("| baseline |"), "{table}");
    assert!(d.join("rep/report.md").exists());
}

#[test]
fn seed_flag_beats_environment_and_file() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("tiny.toml"), TINY).unwrap();
    ok(d, &["generate", "--out", "raw"]);
    ok(d, &["preprocess", "--input", "raw", "--out", "pre"]);
    let out = Command::new(env!("CARGO_BIN_EXE_locon"))
        .current_dir(d)
        .env("LOCON_SEED", "5")
        .args(["--config", "tiny.toml", "--seed", "8", "train", "--data", "pre", "--out", "r", "--phase1-only"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let echoed = std::fs::read_to_string(d.join("r/config.toml")).unwrap();
    assert!(echoed.lines().any(|l| l.trim() == "seed = 8"), "{echoed}");
}

#[test]
fn failures_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("tiny.toml"), TINY).unwrap();
    assert_eq!(locon(d, &["train", "--mode", "bogus"]).status.code(), Some(1));
    assert_eq!(locon(d, &["train", "--data", "missing", "--out", "x"]).status.code(), Some(2));
    std::fs::write(d.join("tiny.toml"), "[train]\nphase1_iter = 3\n").unwrap();
    let out = locon(d, &["generate", "--out", "raw"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.trim().lines().count(), 1, "{err}");
}

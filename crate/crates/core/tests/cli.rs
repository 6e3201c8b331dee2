use std::path::Path;
use std::process::{Command, Output};

use ssacl::harness::{ExperimentConfig, ExperimentReport};
use ssacl::training::read_metrics;

fn ssacl(args: &[&str], cwd: &Path) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_ssacl"))
        .args(args)
        .current_dir(cwd)
        .env_remove("SSACL_DATA_ROOT")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "ssacl {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[test]
fn synth_train_report_features() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    ssacl(&["synth-data", "--out", "toy"], root);
    let toy = root.join("toy");
    assert!(toy.join("labeled.csv").is_file() && toy.join("unlabeled.csv").is_file());

    // Shrink the generated config to a few epochs.
    let mut cfg = ExperimentConfig::load(toy.join("toy.toml")).unwrap();
    assert_eq!(cfg.labeled_manifest, toy.join("labeled.csv"));
    let text = std::fs::read_to_string(toy.join("toy.toml")).unwrap();
    let small = text
        .replace(
            &format!("warmup_epochs = {}", cfg.warmup_epochs),
            "warmup_epochs = 1",
        )
        .replace(&format!("semi_epochs = {}", cfg.semi_epochs), "semi_epochs = 2")
        .replace(
            &format!("supervised_baseline_epochs = {}", cfg.supervised_baseline_epochs),
            "supervised_baseline_epochs = 2",
        )
        .replace("checkpoint_every = 0", "checkpoint_every = 1");
    std::fs::write(toy.join("small.toml"), small).unwrap();
    cfg = ExperimentConfig::load(toy.join("small.toml")).unwrap();
    assert_eq!(
        (cfg.warmup_epochs, cfg.semi_epochs, cfg.checkpoint_every),
        (1, 2, 1)
    );

    for mode in ["full", "supervised"] {
        let out = ssacl(
            &[
                "train",
                "--config",
                "toy/small.toml",
                "--mode",
                mode,
                "--fold",
                "2",
                "--seed",
                "4",
            ],
            root,
        );
        assert!(String::from_utf8_lossy(&out.stdout).contains("report.json"));
    }
    let run = toy.join("runs").join("toy_full_seed4");
    let report = ExperimentReport::read_json(run.join("report.json")).unwrap();
    assert_eq!(report.folds.len(), 1);
    assert_eq!(report.folds[0].fold, 2);
    assert_eq!(report.folds[0].test_series().len(), 2);
    let csv = std::fs::read_to_string(run.join("epochs.csv")).unwrap();
    assert!(csv.lines().next().unwrap().contains("test_accuracy"));
    let metrics = read_metrics(run.join("fold2").join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.len(), 3);
    assert!(run.join("fold2/checkpoints/final.ckpt").is_file());
    assert!(run.join("fold2/checkpoints/epoch_0002.ckpt").is_file());

    let out = ssacl(&["report", "--runs", "toy/runs"], root);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("toy_full_seed4") && stdout.contains("toy_supervised_seed4"));
    assert!(toy.join("runs/summary.json").is_file() && toy.join("runs/summary.csv").is_file());

    ssacl(
        &[
            "features",
            "--manifest",
            "toy/labeled.csv",
            "--out",
            "feats",
            "--config",
            "toy/small.toml",
        ],
        root,
    );
    let n = std::fs::read_dir(root.join("feats")).unwrap().count();
    assert_eq!(
        n,
        std::fs::read_to_string(toy.join("labeled.csv"))
            .unwrap()
            .lines()
            .count()
            - 1
    );
}

#[test]
fn errors_exit_non_zero_with_context() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "labeled_manifest = 'missing.csv'\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_ssacl"))
        .args(["train", "--config", "bad.toml"])
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.csv"));

    let out = Command::new(env!("CARGO_BIN_EXE_ssacl"))
        .args(["train", "--config", "bad.toml", "--mode", "sideways"])
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
}

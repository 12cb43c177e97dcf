//! End-to-end exercise of the command surface on a miniature synthetic run.

use std::path::Path;
use std::process::Command;

fn run(args: &[&str], dir: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_hsidiff"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &std::process::Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

const TINY_CONFIG: &str = r#"
seed = 5

[data]
patch = 3
[data.source]
kind = "synth"
[data.source.spec]
height = 10
width = 10
bands = 6
classes = 3
noise_sigma = 0.02
[data.split]
kind = "per_class_count"
count = 4

[diffusion]
t_total = 8
beta_start = 1e-3
beta_end = 0.3

[model]
width = 8
groups = 2
time_dim = 8
d_cls = 8
reduction = 4
gn_groups = 2

[pretrain]
batch = 2
steps = 4

[select]
k = 5
probe_size = 6

[classify]
batch = 6
epochs = 2
"#;

#[test]
fn full_command_sequence_runs_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), TINY_CONFIG).unwrap();
    let base = ["--config", "run.toml", "--out", "run"];

    let out = run(&[&base[..], &["synth"]].concat(), dir.path());
    assert_ok(&out);
    assert!(dir.path().join("run/cube.hsc").exists());
    assert!(dir.path().join("run/labels.hsc").exists());

    let out = run(&[&base[..], &["pretrain"]].concat(), dir.path());
    assert_ok(&out);
    assert!(dir.path().join("run/pretrain.ckpt").exists());
    assert!(dir.path().join("run/pretrain_log.tsv").exists());

    let out = run(&[&base[..], &["rank-timesteps"]].concat(), dir.path());
    assert_ok(&out);
    let ranking = std::fs::read_to_string(dir.path().join("run/ranking.tsv")).unwrap();
    assert!(ranking.starts_with("t\tmean_sam\tselected"));
    assert_eq!(ranking.lines().count(), 9); // header + 8 candidates

    let out = run(&[&base[..], &["train-classifier"]].concat(), dir.path());
    assert_ok(&out);
    assert!(dir.path().join("run/classifier.ckpt").exists());

    let out = run(&[&base[..], &["evaluate"]].concat(), dir.path());
    assert_ok(&out);
    let table = std::fs::read_to_string(dir.path().join("run/metrics.txt")).unwrap();
    for row in ["OA", "AA", "kappa", "FWIoU", "MIoU"] {
        assert!(table.contains(row), "missing {row} in:\n{table}");
    }

    let out = run(&[&base[..], &["predict-map"]].concat(), dir.path());
    assert_ok(&out);
    let first = std::fs::read(dir.path().join("run/prediction.ppm")).unwrap();
    assert!(first.starts_with(b"P6\n10 10\n255\n"));

    // re-running prediction with the same seed is byte-identical
    let out = run(&[&base[..], &["predict-map"]].concat(), dir.path());
    assert_ok(&out);
    let second = std::fs::read(dir.path().join("run/prediction.ppm")).unwrap();
    assert_eq!(first, second);
}

#[test]
fn seed_override_changes_hash_and_is_enforced() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), TINY_CONFIG).unwrap();
    let base = ["--config", "run.toml", "--out", "run"];
    assert_ok(&run(&[&base[..], &["pretrain"]].concat(), dir.path()));

    // evaluating under a different seed must refuse the checkpoint
    let out = run(
        &[&base[..], &["--seed", "99", "rank-timesteps"]].concat(),
        dir.path(),
    );
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("hash mismatch"),
        "unexpected stderr: {stderr}"
    );
}

#[test]
fn missing_config_falls_back_to_defaults_for_synth() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["--out", "d", "--seed", "3", "synth"], dir.path());
    assert_ok(&out);
    assert!(dir.path().join("d/cube.hsc").exists());
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use refsr_cli::commands::{EVAL_FILE, EVAL_HEADER, ROBUSTNESS_FILE};
use refsr_cli::config::RunConfig;
use refsr_core::robustness::ROBUSTNESS_HEADER;
use refsr_core::training::read_log;

fn refsr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_refsr"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = refsr(args);
    assert!(
        out.status.success(),
        "refsr {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn init_config_parses_back() {
    for preset in ["desk", "paper"] {
        let text = ok(&["init-config", "--preset", preset]);
        assert!(text.contains('#'));
        RunConfig::parse(&text, "stdout").unwrap();
    }
}

#[test]
fn param_count_reports_modules_and_total() {
    let text = ok(&["param-count"]);
    assert!(text.contains("total"), "{text}");
    assert!(text.contains("fe"), "{text}");
}

#[test]
fn invalid_ablation_exits_with_usage_error() {
    let out = refsr(&["param-count", "--ablation", "half-gate"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("half-gate"), "{err}");
}

#[test]
fn unknown_config_key_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "seed = 1\n\n[train]\nstepz = 3\n").unwrap();
    let out = refsr(&["param-count", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bad.toml:4"), "{err}");
}

#[test]
fn synth_prepare_train_eval_robustness() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let (hr, data, run) = (root.join("hr"), root.join("data"), root.join("run"));

    let listed = ok(&["synth-data", "--count", "2", "--size", "64", "--out", s(&hr)]);
    assert_eq!(listed.lines().count(), 2);

    ok(&["prepare-data", "--hr-dir", s(&hr), "--out", s(&data)]);
    let manifest = data.join("manifest.tsv");
    let first = fs::read(&manifest).unwrap();
    ok(&["prepare-data", "--hr-dir", s(&hr), "--out", s(&data)]);
    assert_eq!(first, fs::read(&manifest).unwrap(), "prepare-data is not idempotent");

    let cfg = root.join("run.toml");
    fs::write(
        &cfg,
        format!(
            "seed = 4\n[data]\nmanifest = {:?}\n[train]\nsteps = 2\nbatch_size = 1\n[robustness]\nlevels = [\"small\"]\nmatchers = [\"oracle\", \"patch\", \"model\"]\n",
            s(&manifest)
        ),
    )
    .unwrap();
    let checkpoint = ok(&["train", "--config", s(&cfg), "--out", s(&run)]);
    let checkpoint = checkpoint.trim();
    assert!(Path::new(checkpoint).exists());
    assert_eq!(read_log(&run.join("train_log.tsv")).unwrap().len(), 2);
    assert!(run.join("resolved_config.toml").exists());

    let table = ok(&["eval", "--config", s(&cfg), "--checkpoint", checkpoint, "--out", s(&run)]);
    assert!(table.contains("bicubic"));
    let tsv = fs::read_to_string(run.join(EVAL_FILE)).unwrap();
    let mut lines = tsv.lines();
    assert_eq!(lines.next(), Some(EVAL_HEADER));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows.len(), 2 * 2 + 2);
    for r in &rows {
        assert_eq!(r.len(), 4);
        assert!(["model", "bicubic"].contains(&r[1]));
        assert!(r[2] == "inf" || r[2].parse::<f64>().is_ok());
        assert!(r[3].parse::<f64>().is_ok());
    }
    assert_eq!(rows[rows.len() - 2][0], "mean");

    ok(&["robustness", "--config", s(&cfg), "--checkpoint", checkpoint, "--out", s(&run)]);
    let tsv = fs::read_to_string(run.join(ROBUSTNESS_FILE)).unwrap();
    let mut lines = tsv.lines();
    assert_eq!(lines.next(), Some(ROBUSTNESS_HEADER));
    // two kinds x (identity + small) x three matchers
    assert_eq!(lines.count(), 2 * 2 * 3);
}

#[test]
fn eval_rejects_mismatched_extents() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let (hr, data, run) = (root.join("hr"), root.join("data"), root.join("run"));
    ok(&["synth-data", "--count", "1", "--size", "64", "--out", s(&hr)]);
    ok(&["prepare-data", "--hr-dir", s(&hr), "--out", s(&data)]);
    let cfg = root.join("run.toml");
    fs::write(
        &cfg,
        format!(
            "[data]\nmanifest = {:?}\n[train]\nsteps = 1\nbatch_size = 1\n",
            s(&data.join("manifest.tsv"))
        ),
    )
    .unwrap();
    let checkpoint = ok(&["train", "--config", s(&cfg), "--out", s(&run)]);

    let (hr2, data2) = (root.join("hr2"), root.join("data2"));
    ok(&["synth-data", "--count", "1", "--size", "96", "--out", s(&hr2)]);
    ok(&["prepare-data", "--hr-dir", s(&hr2), "--out", s(&data2)]);
    let out = refsr(&[
        "eval",
        "--checkpoint",
        checkpoint.trim(),
        "--manifest",
        s(&data2.join("manifest.tsv")),
        "--out",
        s(&run),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

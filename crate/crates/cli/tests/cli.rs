use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn ghostrnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ghostrnn"))
        .args(args)
        .env_remove("GHOSTRNN_THREADS")
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!(
            "stdout is not JSON ({e}): {}\nstderr: {}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        )
    })
}

const SMALL_ADDING: [&str; 8] = [
    "--task", "adding", "--train-count", "200", "--val-count", "50", "--length", "10",
];

fn train_small(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--out-dir", dir.to_str().unwrap()];
    args.extend_from_slice(&SMALL_ADDING);
    args.extend_from_slice(extra);
    ghostrnn(&args)
}

#[test]
fn count_reports_formula_values() {
    let gru = stdout_json(&ghostrnn(&["count", "--cell", "gru", "--feature-dim", "10", "--state-dim", "100"]));
    assert_eq!(gru["weights_only"], 33_000);
    assert_eq!(gru["macs_per_step"], 33_000);
    let ghost = stdout_json(&ghostrnn(&[
        "count", "--cell", "ghost", "--feature-dim", "10", "--state-dim", "100", "--ratio", "2",
    ]));
    assert_eq!(ghost["weights_only"], 19_000);
    let one = stdout_json(&ghostrnn(&[
        "count", "--cell", "ghost", "--feature-dim", "10", "--state-dim", "100", "--ratio", "1",
    ]));
    assert_eq!(one["weights_only"], 33_000);
}

#[test]
fn train_writes_outputs_and_summary_matches_count() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_small(
        dir.path(),
        &["--cell", "ghost", "--state-dim", "32", "--ratio", "2", "--seed", "1", "--epochs", "3"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["config.json", "metrics.jsonl", "best.ckpt", "final.ckpt"] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
    let summary = stdout_json(&out);
    let count = stdout_json(&ghostrnn(&[
        "count", "--cell", "ghost", "--feature-dim", "2", "--state-dim", "32", "--ratio", "2",
    ]));
    assert_eq!(summary["weights_only"], count["weights_only"]);
    assert_eq!(summary["weights_only"], 1888);
    assert_eq!(summary["feature_dim"], 2);
    let lines = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 3);
}

#[test]
fn repeat_runs_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let flags = ["--cell", "ghost", "--state-dim", "8", "--ratio", "2", "--epochs", "2"];
    assert!(train_small(a.path(), &flags).status.success());
    assert!(train_small(b.path(), &flags).status.success());
    for f in ["metrics.jsonl", "best.ckpt", "final.ckpt", "config.json"] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn repeats_use_consecutive_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_small(
        dir.path(),
        &["--cell", "gru", "--state-dim", "4", "--epochs", "1", "--seed", "5", "--repeats", "2"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let second: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("run_2/config.json")).unwrap())
            .unwrap();
    assert_eq!(second["seed"], 6);
    assert!(dir.path().join("summary.json").is_file());
}

#[test]
fn indivisible_ratio_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_small(dir.path(), &["--cell", "ghost", "--state-dim", "32", "--ratio", "3"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("state-dim not divisible"));
}

#[test]
fn gradcheck_exit_codes() {
    let ok = ghostrnn(&["gradcheck"]);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stdout));
    let bad = ghostrnn(&["gradcheck", "--eps", "1e-1"]);
    assert_eq!(bad.status.code(), Some(4));
    for seed in ["1", "2", "3"] {
        for loss in ["mse", "ce"] {
            let gru = ghostrnn(&["gradcheck", "--cell", "gru", "--ratio", "1", "--seed", seed, "--loss", loss]);
            let ghost = ghostrnn(&["gradcheck", "--cell", "ghost", "--ratio", "1", "--seed", seed, "--loss", loss]);
            assert_eq!(gru.stdout, ghost.stdout);
        }
    }
}

#[test]
fn analyze_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    assert!(train_small(&run, &["--cell", "gru", "--state-dim", "12", "--epochs", "1"]).status.success());
    let ana = dir.path().join("ana");
    let out = ghostrnn(&[
        "analyze",
        "--checkpoint",
        run.join("best.ckpt").to_str().unwrap(),
        "--out-dir",
        ana.to_str().unwrap(),
        "--task",
        "adding",
        "--count",
        "20",
        "--length",
        "10",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let sim = std::fs::read_to_string(ana.join("similarity.csv")).unwrap();
    let rows: Vec<Vec<f64>> = sim
        .lines()
        .map(|l| l.split(',').map(|c| c.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 12);
    for i in 0..12 {
        assert_eq!(rows[i].len(), 12);
        assert_eq!(rows[i][i], 1.0);
        for j in 0..12 {
            assert_eq!(rows[i][j], rows[j][i]);
        }
    }
    let report: Value =
        serde_json::from_str(&std::fs::read_to_string(ana.join("pca_report.json")).unwrap()).unwrap();
    let contribution = report["contribution"].as_array().unwrap();
    assert_eq!(contribution.last().unwrap().as_f64(), Some(1.0));
    assert_eq!(report["m"], 12);
    assert!(ana.join("singular_values.csv").is_file());
    assert!(ana.join("contribution.csv").is_file());
}

#[test]
fn missing_checkpoint_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = ghostrnn(&[
        "analyze",
        "--checkpoint",
        dir.path().join("nope.ckpt").to_str().unwrap(),
        "--out-dir",
        dir.path().to_str().unwrap(),
        "--task",
        "adding",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let out = ghostrnn(&["eval", "--checkpoint", "/nonexistent/x.ckpt", "--task", "adding"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_reports_the_task_metric() {
    let dir = tempfile::tempdir().unwrap();
    assert!(train_small(dir.path(), &["--cell", "ghost", "--state-dim", "8", "--epochs", "1"]).status.success());
    let out = ghostrnn(&[
        "eval",
        "--checkpoint",
        dir.path().join("best.ckpt").to_str().unwrap(),
        "--task",
        "adding",
        "--count",
        "50",
        "--length",
        "10",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v = String::from_utf8_lossy(&out.stdout);
    assert!(v.contains("mse"), "{v}");
}

#[test]
fn export_writes_tensors_and_datasets() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    assert!(train_small(&run, &["--cell", "ghost", "--state-dim", "4", "--epochs", "1"]).status.success());
    let out_dir = dir.path().join("tensors");
    let out = ghostrnn(&[
        "export",
        "--checkpoint",
        run.join("best.ckpt").to_str().unwrap(),
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let w = std::fs::read_to_string(out_dir.join("phi.w_phi.csv")).unwrap();
    assert_eq!(w.lines().count(), 2);
    let data_dir = dir.path().join("data");
    let out = ghostrnn(&[
        "export", "--task", "adding", "--count", "3", "--length", "5", "--out-dir",
        data_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::metadata(data_dir.join("inputs.f64")).unwrap().len(), 3 * 5 * 2 * 8);
    assert!(data_dir.join("dataset.json").is_file());
}

#[test]
fn help_documents_defaults() {
    let out = ghostrnn(&["gradcheck", "--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("[default: 1e-5]") || text.contains("[default: 0.00001]"), "{text}");
    let out = ghostrnn(&["train", "--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("--state-dim"));
    assert!(text.contains("GHOSTRNN_THREADS"), "{text}");
    assert_eq!(ghostrnn(&["train", "--bogus"]).status.code(), Some(2));
}

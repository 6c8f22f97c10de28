//! The `qprune` binary end to end.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn qprune(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qprune"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(args: &[&str]) -> String {
    let o = qprune(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    stdout(&o)
}

const TINY: &str = "\
widths = 4, 8, 8, 8
epochs = 1
lr0 = 0.05
batch_size = 32
calib_size = 50
finetune_epochs = 0
final_finetune_epochs = 0
eval_passes = 1
";

/// Writes a small dataset and trains a tiny model; returns (data dir, model).
fn trained(dir: &Path) -> (String, String) {
    let data = dir.join("data");
    let cfg = dir.join("tiny.ini");
    let model = dir.join("tiny.qprn");
    fs::write(&cfg, TINY).unwrap();
    let data_s = data.to_str().unwrap().to_string();
    ok(&[
        "synth", "--out", &data_s, "--train", "200", "--val", "100", "--seed", "4",
    ]);
    ok(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        &data_s,
        "--out",
        model.to_str().unwrap(),
    ]);
    (data_s, model.to_str().unwrap().to_string())
}

#[test]
fn account_reproduces_the_conv1_row() {
    let out = ok(&["account", "--model", "builtin:resnet18-xnor"]);
    let conv1 = out.lines().find(|l| l.starts_with("conv1 ")).expect("conv1 row");
    let cols: Vec<&str> = conv1.split_whitespace().collect();
    assert_eq!(&cols[2..4], ["9K", "0.035"], "{conv1}");
    let fc = out.lines().find(|l| l.starts_with("fc ")).expect("fc row");
    assert!(fc.split_whitespace().any(|c| c == "1.956"), "{fc}");
}

#[test]
fn eval_twice_gives_identical_errors() {
    let dir = TempDir::new().unwrap();
    let (data, model) = trained(dir.path());
    let run = || {
        let out = ok(&["eval", "--model", &model, "--data", &data, "--passes", "10"]);
        // The latency line varies between runs; error and loss must not.
        out.lines().take(2).map(str::to_string).collect::<Vec<_>>()
    };
    let a = run();
    assert!(a[0].starts_with("top1_error_pct "));
    assert_eq!(a, run());
}

#[test]
fn prune_with_zero_alpha_keeps_the_model_bytes() {
    let dir = TempDir::new().unwrap();
    let (data, model) = trained(dir.path());
    let cfg = dir.path().join("tiny.ini");
    let out = dir.path().join("pruned.qprn");
    let report = dir.path().join("report.csv");
    #[rustfmt::skip]
    ok(&[
        "prune", "--model", &model, "--data", &data, "--config", cfg.to_str().unwrap(),
        "--metric", "angle", "--alpha1", "0", "--direction", "up",
        "--out", out.to_str().unwrap(), "--report", report.to_str().unwrap(),
    ]);
    assert_eq!(fs::read(&out).unwrap(), fs::read(&model).unwrap());
    let csv = fs::read_to_string(&report).unwrap();
    assert!(csv.lines().next().unwrap().contains("pruned_ratio_pct"));
    assert_eq!(csv.lines().count(), 1 + 5);
}

#[test]
fn prune_writes_model_report_and_traces() {
    let dir = TempDir::new().unwrap();
    let (data, model) = trained(dir.path());
    let cfg = dir.path().join("tiny.ini");
    let out = dir.path().join("pruned.qprn");
    let report = dir.path().join("report.csv");
    let traces = dir.path().join("traces");
    #[rustfmt::skip]
    let text = ok(&[
        "prune", "--model", &model, "--data", &data, "--config", cfg.to_str().unwrap(),
        "--metric", "euclid", "--alpha1", "1", "--direction", "down",
        "--out", out.to_str().unwrap(), "--report", report.to_str().unwrap(),
        "--trace-dir", traces.to_str().unwrap(),
    ]);
    assert!(text.contains("pruned"));
    assert!(fs::read_dir(&traces).unwrap().count() >= 1);
    ok(&["account", "--model", out.to_str().unwrap()]);
}

#[test]
fn rank_emits_one_row_per_unit() {
    // conv3 of the desk net has 16 filters over 16 channels.
    for (mode, units) in [("kernel", 16 * 16), ("filter-own", 16), ("filter-interaction", 16)] {
        let out = ok(&[
            "rank",
            "--model",
            "builtin:desk-bnn",
            "--layer",
            "conv3",
            "--mode",
            mode,
        ]);
        assert_eq!(out.lines().count(), units + 1, "{mode}");
    }
}

#[test]
fn usage_errors_exit_with_1() {
    for args in [
        vec![],
        vec!["frobnicate"],
        vec!["account"],
        vec![
            "prune", "--model", "m", "--data", "d", "--metric", "cosine", "--out", "o", "--report", "r",
        ],
        vec![
            "rank",
            "--model",
            "builtin:desk-bnn",
            "--layer",
            "conv3",
            "--mode",
            "sideways",
        ],
    ] {
        assert_eq!(qprune(&args).status.code(), Some(1), "{args:?}");
    }
}

#[test]
fn runtime_errors_exit_with_2() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("missing.qprn");
    let garbage = dir.path().join("garbage.qprn");
    fs::write(&garbage, b"not a model").unwrap();
    for model in [missing.to_str().unwrap(), garbage.to_str().unwrap(), "builtin:resnet99"] {
        let o = qprune(&["account", "--model", model]);
        assert_eq!(o.status.code(), Some(2), "{model}");
        assert!(String::from_utf8_lossy(&o.stderr).starts_with("error: "));
    }
    let o = qprune(&[
        "rank",
        "--model",
        "builtin:desk-bnn",
        "--layer",
        "nope",
        "--mode",
        "kernel",
    ]);
    assert_eq!(o.status.code(), Some(2));
    let o = qprune(&[
        "eval",
        "--model",
        "builtin:desk-bnn",
        "--data",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn help_exits_cleanly() {
    assert_eq!(qprune(&["--help"]).status.code(), Some(0));
    assert!(stdout(&qprune(&["prune", "--help"])).contains("--alpha1"));
}

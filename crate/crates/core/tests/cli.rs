//! End-to-end runs of the binary on the synthetic task; checks headers,
//! JSON keys and exit codes.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SYNTH: &str = r#"
[data]
source = "synthetic"

[data.synthetic]
train = 96
test = 64
features = 8
classes = 3

[model]
input = { channels = 8, height = 1, width = 1 }
layers = [{ type = "dense", units = 24 }, { type = "dense", units = 3 }]

[train]
lr = 0.05
batch_size = 16
epochs = 2
"#;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ditherprop"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn write_config(dir: &Path, extra: &str) -> String {
    let p = dir.join("run.toml");
    fs::write(&p, format!("{SYNTH}\n{extra}")).unwrap();
    p.to_string_lossy().into_owned()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn keys(v: &Value) -> Vec<String> {
    let mut k: Vec<String> = v.as_object().unwrap().keys().cloned().collect();
    k.sort();
    k
}

fn first_line(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

#[test]
fn train_writes_metrics_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("train");
    let o = run(&["train", "--config", &cfg, "--mode", "dithered", "--s", "2", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(first_line(&out.join("metrics.csv")), "iteration,epoch,layer,sparsity,bitwidth,loss");
    // 6 iterations per epoch × 2 epochs × 2 layers
    assert_eq!(fs::read_to_string(out.join("metrics.csv")).unwrap().lines().count(), 1 + 12 * 2);
    let s = json(&out.join("summary.json"));
    assert_eq!(
        keys(&s),
        [
            "bitwidth_over_8",
            "command",
            "config",
            "epoch_accuracies",
            "epoch_sparsity",
            "final_accuracy",
            "final_loss",
            "iterations",
            "macs_dense_equivalent",
            "mean_sparsity",
            "nsd_overhead_ops",
            "per_layer_sparsity",
            "savings_ratio",
            "total_macs",
            "worst_bitwidth",
        ]
    );
    assert_eq!(s["config"]["train"]["mode"], "dithered");
    assert_eq!(s["config"]["train"]["scale"], 2.0);
    assert_eq!(s["iterations"], 12);
    let ratio = s["savings_ratio"].as_f64().unwrap();
    let expect = s["total_macs"].as_f64().unwrap() / s["macs_dense_equivalent"].as_f64().unwrap();
    assert!((ratio - expect).abs() < 1e-12);
}

#[test]
fn dithered_is_sparser_than_exact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let sparsity = |mode: &str, extra: &[&str]| {
        let out = dir.path().join(mode);
        let mut args = vec!["train", "--config", &cfg, "--mode", mode, "--out", out.to_str().unwrap()];
        args.extend_from_slice(extra);
        assert!(run(&args).status.success());
        json(&out.join("summary.json"))["mean_sparsity"].as_f64().unwrap()
    };
    assert!(sparsity("dithered", &["--s", "3"]) > sparsity("exact", &[]));
}

#[test]
fn malformed_config_exits_2_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("never");
    for body in ["[train]\nlr = \"fast\"\n", "[train]\nlearning_rate = 0.1\n", "not toml at all ["] {
        let p = dir.path().join("bad.toml");
        fs::write(&p, body).unwrap();
        for cmd in ["train", "compare-meprop", "distributed", "analyze-dither"] {
            let o = run(&[cmd, "--config", p.to_str().unwrap(), "--out", out.to_str().unwrap()]);
            assert_eq!(o.status.code(), Some(2), "{cmd} with {body:?}");
            assert!(!o.stderr.is_empty());
            assert!(!out.exists(), "{cmd} left partial outputs");
        }
    }
    let cfg = write_config(dir.path(), "");
    let o = run(&["train", "--config", &cfg, "--mode", "exact", "--s", "3", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
    let o = run(&["train", "--config", "/nonexistent/run.toml"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn compare_writes_rows_per_mode_target_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[compare]\ngrid = [0.0, 0.6]\nseeds = [0, 1, 2]\n");
    let out = dir.path().join("cmp");
    let o = run(&["compare-meprop", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out.join("comparison.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), "mode,target_sparsity,achieved_sparsity,accuracy,seed");
    let rep = json(&out.join("comparison.json"));
    assert_eq!(keys(&rep), ["calibrations", "config", "rows", "skipped"]);
    let skipped = rep["skipped"].as_array().unwrap().len();
    assert_eq!(text.lines().count() - 1, (2 * 2 - skipped) * 3);
}

#[test]
fn single_node_sweep_matches_batch_one_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[distributed]\nnodes = [1]\nvariance_reps = 0\n");
    let dist = dir.path().join("dist");
    let o = run(&["distributed", "--config", &cfg, "--s", "2", "--out", dist.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let sweep = json(&dist.join("sweep.json"));
    assert_eq!(keys(&sweep), ["config", "noise_variance", "results", "schedule"]);
    let r = &sweep["results"][0];
    assert_eq!(
        keys(r),
        ["accuracy", "comm_scalars", "lr", "macs", "mean_sparsity", "nodes", "rounds", "s", "worst_bitwidth"]
    );

    let train = dir.path().join("train");
    let o = run(&[
        "train", "--config", &cfg, "--mode", "dithered", "--s", "2", "--batch", "1", "--out", train.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let s = json(&train.join("summary.json"));
    assert_eq!(r["accuracy"], s["final_accuracy"]);
    assert_eq!(r["mean_sparsity"], s["mean_sparsity"]);
    assert_eq!(r["macs"], s["total_macs"]);
    assert_eq!(r["rounds"], s["iterations"]);
}

#[test]
fn sweep_follows_sqrt_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[distributed]\nnodes = [1, 2, 4]\nvariance_reps = 40\nvariance_samples = 8\n");
    let out = dir.path().join("dist");
    let o = run(&["distributed", "--config", &cfg, "--s", "1", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let sweep = json(&out.join("sweep.json"));
    for r in sweep["results"].as_array().unwrap() {
        let n = r["nodes"].as_f64().unwrap();
        assert!((r["s"].as_f64().unwrap() - n.sqrt()).abs() < 1e-12);
        assert!((r["lr"].as_f64().unwrap() - 0.05 * n).abs() < 1e-12);
        assert_eq!(r["rounds"].as_f64().unwrap(), 2.0 * (96.0 / n).floor());
    }
    assert_eq!(sweep["schedule"], "sqrt");
    assert!(sweep["noise_variance"]["slope"].is_number());
}

#[test]
fn analyze_writes_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[analyze]\ncapture_every = 3\nscales = [1.0, 3.0]\n");
    let out = dir.path().join("an");
    let o = run(&["analyze-dither", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        first_line(&out.join("analysis.csv")),
        "iteration,layer,zero_fraction,sigma,delta,laplace_b,predicted_p0,predicted_p0_zero_inflated,empirical_p0"
    );
    let rep = json(&out.join("analysis.json"));
    assert_eq!(keys(&rep), ["config", "gaussian", "layers", "scale", "worst_laplace_gap"]);
    assert_eq!(rep["gaussian"].as_array().unwrap().len(), 2);
}

#[test]
fn verify_help_and_usage_errors() {
    let o = run(&["--help"]);
    assert!(o.status.success());
    let help = String::from_utf8_lossy(&o.stdout);
    for cmd in ["train", "compare-meprop", "distributed", "analyze-dither", "verify"] {
        assert!(help.contains(cmd), "{cmd} missing from help");
    }
    assert_eq!(run(&["train", "--mode", "sideways"]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
}

use std::path::Path;
use std::process::{Command, Output};

use socm_core::metrics::MetricsRecord;

fn socm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_socm"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

const TINY: &str = r#"
[problem]
setting = "quadratic_ou_easy"
dim = 2

[training]
loss = "socm"
seed = 3
iterations = 20
batch = 8
steps = 10
width = 8
matrix_width = 8
eval_every = 5
eval_batches = 2
"#;

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn zero_iterations_write_checkpoint_and_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    write(&cfg, TINY);
    let out = dir.path().join("out");
    let o = socm(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--iters",
        "0",
        "--output-dir",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(csv, format!("{}\n", MetricsRecord::COLUMNS.join(",")));
    assert!(out.join("checkpoint.ckpt").exists());
    assert!(out.join("checkpoint.ckpt.manifest.txt").exists());
    assert_eq!(read_json(&out.join("summary.json"))["iterations_completed"], 0);
}

#[test]
fn runs_reproduce_bitwise_and_flags_take_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    write(&cfg, TINY);
    let mut csvs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let o = socm(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--iters",
            "10",
            "--output-dir",
            out.to_str().unwrap(),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        csvs.push(std::fs::read(out.join("metrics.csv")).unwrap());
        let summary = read_json(&out.join("summary.json"));
        assert_eq!(summary["iterations_completed"], 10);
        assert_eq!(summary["status"], "completed");
        assert_eq!(summary["config"]["training"]["iterations"], 10);
    }
    assert_eq!(csvs[0], csvs[1]);
    let text = String::from_utf8(csvs[0].clone()).unwrap();
    assert_eq!(text.lines().count(), 3);

    let out = dir.path().join("c");
    let o = socm(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--iters",
        "10",
        "--seed",
        "4",
        "--output-dir",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert_ne!(std::fs::read(out.join("metrics.csv")).unwrap(), csvs[0]);
}

#[test]
fn configuration_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    write(&cfg, "[training]\nloss = socm\n");
    let o = socm(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));

    write(&cfg, "[training]\nloss = \"socm\"\nlr = 0.1\n");
    let o = socm(&["train", "--config", cfg.to_str().unwrap(), "--setting", "double_well"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("lr"));

    let o = socm(&["train", "--setting", "double_well", "--loss", "nope"]);
    assert_eq!(o.status.code(), Some(2));
    let o = socm(&["train", "--config", dir.path().join("missing.toml").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = socm(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    let o = socm(&[
        "ground-truth",
        "--setting",
        "pis_mixture_d2",
        "--cache",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn repeated_failures_abort_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    write(
        &cfg,
        &format!("{TINY}max_consecutive_failures = 3\ninject_failures = [2, 3, 4, 5]\n"),
    );
    let out = dir.path().join("out");
    let o = socm(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--output-dir",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3));
    let summary = read_json(&out.join("summary.json"));
    assert_eq!(summary["status"], "aborted");
    assert_eq!(summary["iterations_completed"], 5);
    assert_eq!(summary["skipped_updates"], 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("step skipped"));
}

#[test]
fn eval_recomputes_metrics_from_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    write(&cfg, TINY);
    let out = dir.path().join("out");
    let o = socm(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--output-dir",
        out.to_str().unwrap(),
        "--dump-trajectories",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let traj = std::fs::read_to_string(out.join("trajectories.csv")).unwrap();
    assert_eq!(traj.lines().next().unwrap(), "path,step,time,x0,x1");
    assert_eq!(traj.lines().count(), 1 + 8 * 11);

    let ckpt = out.join("checkpoint.ckpt");
    let json_out = dir.path().join("eval.json");
    let args = [
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--setting",
        "quadratic_ou_easy",
        "--batches",
        "2",
    ];
    let o = socm(&[&args[..], &["--out", json_out.to_str().unwrap()]].concat());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v = read_json(&json_out);
    assert_eq!(v["iteration"], 20);
    assert!(v["metrics"]["l2_error"].as_f64().unwrap() >= 0.0);
    assert!(v["metrics"]["control_objective"].as_f64().unwrap().is_finite());
    let again = socm(&args);
    let printed: serde_json::Value = serde_json::from_slice(&again.stdout).unwrap();
    assert_eq!(printed["metrics"], v["metrics"]);

    let o = socm(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--setting",
        "double_well",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn ground_truth_cache_is_written_and_used() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("cache");
    let o = socm(&[
        "ground-truth",
        "--setting",
        "linear_ou",
        "--dim",
        "3",
        "--cache",
        cache.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let file = cache.join("linear_ou-d3-s0.truth");
    assert!(file.exists());
    let manifest = std::fs::read_to_string(cache.join("linear_ou-d3-s0.truth.manifest.txt")).unwrap();
    assert!(manifest.contains("array control_table 101x4"));

    let cfg = dir.path().join("run.toml");
    write(
        &cfg,
        &TINY
            .replace("quadratic_ou_easy", "linear_ou")
            .replace("dim = 2", "dim = 3"),
    );
    let run = |name: &str, extra: &[&str]| {
        let out = dir.path().join(name);
        let mut args = vec![
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--iters",
            "5",
            "--output-dir",
            out.to_str().unwrap(),
        ];
        args.extend_from_slice(extra);
        let o = socm(&args);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read(out.join("metrics.csv")).unwrap()
    };
    assert_eq!(
        run("cached", &["--truth-cache", cache.to_str().unwrap()]),
        run("direct", &[])
    );
}

#[test]
fn gaussian_warm_start_is_saved_and_reusable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    write(
        &cfg,
        &format!(
            "{}warm_start_iterations = 5\nwarm_start_knots = 4\nwarm_start_steps = 10\nwarm_start_batch = 16\n",
            TINY.replace("quadratic_ou_easy", "quadratic_ou_hard")
        ),
    );
    let out = dir.path().join("ws");
    let o = socm(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--iters",
        "5",
        "--output-dir",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = read_json(&out.join("summary.json"));
    assert_eq!(summary["warm_start"]["mode"], "gaussian");
    let ws = out.join("warm_start.ckpt");
    assert!(ws.exists());
    let manifest = std::fs::read_to_string(out.join("checkpoint.ckpt.manifest.txt")).unwrap();
    assert!(manifest.contains("policy = composite"));

    let reuse = dir.path().join("reuse");
    let o = socm(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--iters",
        "5",
        "--warm-start",
        ws.to_str().unwrap(),
        "--output-dir",
        reuse.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        std::fs::read(out.join("metrics.csv")).unwrap(),
        std::fs::read(reuse.join("metrics.csv")).unwrap()
    );

    let none = dir.path().join("none");
    let o = socm(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--iters",
        "0",
        "--warm-start",
        "none",
        "--output-dir",
        none.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let manifest = std::fs::read_to_string(none.join("checkpoint.ckpt.manifest.txt")).unwrap();
    assert!(manifest.contains("policy = neural"));
}

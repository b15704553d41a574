use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

// small enough that a full pipeline takes a few seconds
const FAST: &[&str] = &[
    "--set",
    "train.epochs=3",
    "--set",
    "data.pretrain_singles=6",
    "--set",
    "data.pretrain_groups=40",
    "--set",
    "train.min_recall=0.0",
    "--set",
    "unlearn.ga.steps=3",
    "--set",
    "eval.max_rejection=1.0",
];

fn auvic(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_auvic"))
        .arg("--out")
        .arg(out)
        .args(FAST)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn ok(out: &Path, args: &[&str]) {
    let o = auvic(out, args);
    assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
}

fn prepared() -> TempDir {
    let dir = TempDir::new().unwrap();
    ok(dir.path(), &["gen-data"]);
    ok(dir.path(), &["train-base"]);
    dir
}

#[test]
fn help_exits_zero() {
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&auvic(dir.path(), &["--help"])), 0);
}

#[test]
fn usage_errors_exit_one() {
    let dir = TempDir::new().unwrap();
    for args in [
        &["no-such-command"][..],
        &["--set", "no_equals_sign", "gen-data"],
        &["--set", "train.epochs=\"many\"", "gen-data"],
        &["--set", "benchmark.singles_per_identity=4", "gen-data"],
        &["--jobs", "0", "gen-data"],
        &["unlearn", "--method", "nope", "--target", "id_0"],
    ] {
        let o = auvic(dir.path(), args);
        assert_eq!(code(&o), 1, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    assert!(fs::read_dir(dir.path()).unwrap().next().is_none(), "usage errors wrote output");
}

#[test]
fn missing_inputs_exit_two() {
    let dir = TempDir::new().unwrap();
    let o = auvic(dir.path(), &["eval", "--data", "/nonexistent/auvic-data"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn gen_data_is_deterministic() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    ok(a.path(), &["gen-data"]);
    ok(b.path(), &["gen-data"]);
    for f in ["manifest.jsonl", "roster.json", "summary.json", "config.toml"] {
        let x = fs::read(a.path().join("data").join(f)).unwrap();
        let y = fs::read(b.path().join("data").join(f)).unwrap();
        assert!(x == y, "{f} differs between runs");
    }
    let c = TempDir::new().unwrap();
    ok(c.path(), &["--seed", "7", "gen-data"]);
    let x = fs::read(a.path().join("data/manifest.jsonl")).unwrap();
    let z = fs::read(c.path().join("data/manifest.jsonl")).unwrap();
    assert!(x != z, "seed has no effect");
}

#[test]
fn pipeline_writes_outputs_with_config() {
    let dir = prepared();
    let out = dir.path();
    assert!(out.join("base/model.ckpt").is_file());
    assert!(out.join("base/train_report.json").is_file());

    ok(out, &["unlearn", "--method", "ga", "--target", "id_1"]);
    let run = out.join("unlearn/ga-id_1");
    for f in ["model.ckpt", "log.jsonl", "config.toml"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let log = fs::read_to_string(run.join("log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    let cfg = fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(cfg.contains("epochs = 3"), "config.toml lacks the override");

    let ckpt = run.join("model.ckpt");
    ok(out, &["eval", "--checkpoint", ckpt.to_str().unwrap(), "--target", "id_1", "--label", "ga"]);
    let metrics = fs::read_to_string(out.join("eval/ga/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
    assert!(metrics.lines().nth(1).unwrap().starts_with("ga,id_1,"));
    let decisions = fs::read_to_string(out.join("eval/ga/decisions.csv")).unwrap();
    assert!(decisions.lines().count() > 100);
}

#[test]
fn invalid_target_writes_nothing() {
    let dir = prepared();
    let out = dir.path();
    let o = auvic(out, &["unlearn", "--method", "ga", "--target", "id_99"]);
    assert_eq!(code(&o), 1);
    assert!(!out.join("unlearn").exists());
    let o = auvic(out, &["eval", "--target", "nobody"]);
    assert_eq!(code(&o), 1);
    assert!(!out.join("eval").exists());
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const SPEC: &str = r#"{"vocab_size": 20, "source_len_min": 5, "source_len_max": 8,
  "rule": {"kind": "keyword_extract", "keyword_classes": 3}, "noise_rate": 0.2, "seed": 1}"#;
const SMALL: &str = r#"{"model": {"hidden": 8},
  "train": {"learning_rate": 0.3, "max_iterations": 60, "validate_every": 20, "patience": 60},
  "analysis": {"resamples": 1000}}"#;

fn rlsum(args: &[&str]) -> Output {
    rlsum_env(args, None)
}

fn rlsum_env(args: &[&str], seed_env: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_rlsum"));
    cmd.args(args).env_remove("RLSUM_SEED");
    if let Some(s) = seed_env {
        cmd.env("RLSUM_SEED", s);
    }
    cmd.output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "exit {:?}: {}", o.status.code(), stderr(&o));
    o
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    corpus: PathBuf,
    config: PathBuf,
}

fn fixture(n: usize) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let spec = root.join("spec.json");
    fs::write(&spec, SPEC).unwrap();
    let config = root.join("cfg.json");
    fs::write(&config, SMALL).unwrap();
    let corpus = root.join("data/corpus.jsonl");
    ok(rlsum(&["gen-data", "--spec", s(&spec), "--n", &n.to_string(), "--out", s(&corpus)]));
    Fixture {
        _dir: dir,
        root,
        corpus,
        config,
    }
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn every_help_option_shows_default_or_required() {
    let commands = ["gen-data", "train", "finetune", "sweep-gamma", "evaluate", "analyze"];
    for cmd in commands {
        let o = ok(rlsum(&[cmd, "--help"]));
        let text = String::from_utf8(o.stdout).unwrap();
        let mut options = 0;
        for line in text.lines().filter(|l| l.trim_start().starts_with("--")) {
            if line.contains("--help") || line.contains("--version") {
                continue;
            }
            options += 1;
            assert!(
                line.contains("[default:") || line.contains("[required]"),
                "{cmd}: option without default: {line}"
            );
        }
        assert!(options >= 4, "{cmd}: {text}");
    }
}

#[test]
fn missing_config_file_is_an_io_error() {
    let o = rlsum(&["train", "--config", "/nonexistent/cfg.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/nonexistent/cfg.json"), "{}", stderr(&o));
}

#[test]
fn bad_config_value_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"train": {"gamma": "high"}}"#).unwrap();
    let o = rlsum(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("run"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("train.gamma"), "{}", stderr(&o));

    let o = rlsum(&["train", "--set", "train.validate_every=7", "--out", s(&dir.path().join("run"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("train.patience"), "{}", stderr(&o));
}

#[test]
fn unknown_flag_fails() {
    let o = rlsum(&["train", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn full_pipeline_writes_its_artifacts() {
    let f = fixture(300);
    let (corpus, cfg) = (s(&f.corpus), s(&f.config));
    assert!(f.root.join("data/config_resolved.json").exists());
    let lines = fs::read_to_string(&f.corpus).unwrap().lines().count();
    assert_eq!(lines, 300);

    let nll = f.root.join("runs/nll");
    ok(rlsum(&["train", "--config", cfg, "--data", corpus, "--out", s(&nll)]));
    for file in ["checkpoint.json", "config_resolved.json", "trace.csv", "result.json"] {
        assert!(nll.join(file).exists(), "{file}");
    }
    let trace = fs::read_to_string(nll.join("trace.csv")).unwrap();
    assert!(trace.starts_with("iteration,loss,dev_loss,dev_objective_loss,rouge1,rouge2,rougel"));
    assert_eq!(trace.lines().count(), 61);

    let risk = f.root.join("runs/risk3");
    ok(rlsum(&[
        "finetune", "--config", cfg, "--warm-start", s(&nll), "--objective", "risk3", "--out", s(&risk),
    ]));
    assert_eq!(json(&risk.join("result.json"))["objective"], "risk3");
    assert_eq!(json(&risk.join("config_resolved.json"))["train"]["objective"], "risk3");

    let sweep = f.root.join("runs/sweep");
    ok(rlsum(&[
        "sweep-gamma", "--config", cfg, "--warm-start", s(&nll), "--grid", "0.3,0.9", "--format", "json", "--out",
        s(&sweep),
    ]));
    assert!(sweep.join("sweep.json").exists());
    let gamma = json(&sweep.join("selected.json"))["gamma"].as_f64().unwrap();
    assert!(gamma == 0.3 || gamma == 0.9);

    let eval = f.root.join("runs/eval");
    let nll_sys = format!("nll={}", s(&nll));
    let risk_sys = format!("risk3={}", s(&risk));
    ok(rlsum(&[
        "evaluate", "--config", cfg, "--data", corpus, "--system", &nll_sys, "--system", &risk_sys, "--out", s(&eval),
    ]));
    let metrics = fs::read_to_string(eval.join("metrics.csv")).unwrap();
    assert!(metrics.lines().next().unwrap().starts_with("system,"));
    assert_eq!(metrics.lines().count(), 3);

    let an = f.root.join("runs/an");
    ok(rlsum(&["analyze", "--config", cfg, "--scores", s(&eval.join("scores.json")), "--out", s(&an)]));
    for file in [
        "config_resolved.json",
        "significance.csv",
        "novelty.csv",
        "novelty.dat",
        "length_buckets.csv",
        "length_buckets.dat",
    ] {
        assert!(an.join(file).exists(), "{file}");
    }

    let o = rlsum(&[
        "analyze", "--scores", s(&eval.join("scores.json")), "--baseline", "nope", "--out", s(&an),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("analysis.baseline"), "{}", stderr(&o));
}

#[test]
fn resolved_config_is_written_before_failures() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = rlsum(&["train", "--data", s(&dir.path().join("missing.jsonl")), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    let resolved = json(&out.join("config_resolved.json"));
    assert!(resolved["data"]["path"].as_str().unwrap().ends_with("missing.jsonl"));
}

#[test]
fn identical_invocations_match_and_seed_layers_resolve() {
    let f = fixture(200);
    let (corpus, cfg) = (s(&f.corpus), s(&f.config));
    let run = |name: &str, extra: &[&str], env: Option<&str>| {
        let out = f.root.join(name);
        let mut args = vec!["train", "--config", cfg, "--data", corpus, "--out", s(&out)];
        args.extend_from_slice(extra);
        ok(rlsum_env(&args, env));
        out
    };
    let a = run("a", &[], None);
    let b = run("b", &[], None);
    assert_eq!(
        fs::read_to_string(a.join("checkpoint.json")).unwrap(),
        fs::read_to_string(b.join("checkpoint.json")).unwrap()
    );
    assert_eq!(
        fs::read_to_string(a.join("trace.csv")).unwrap(),
        fs::read_to_string(b.join("trace.csv")).unwrap()
    );
    assert_eq!(json(&a.join("config_resolved.json"))["train"]["seed"], 13);

    let env = run("env", &[], Some("99"));
    assert_eq!(json(&env.join("config_resolved.json"))["train"]["seed"], 99);
    let flag = run("flag", &["--seed", "5"], Some("99"));
    assert_eq!(json(&flag.join("config_resolved.json"))["train"]["seed"], 5);
    assert_ne!(
        fs::read_to_string(a.join("trace.csv")).unwrap(),
        fs::read_to_string(flag.join("trace.csv")).unwrap()
    );

    let o = rlsum_env(&["train", "--config", cfg, "--data", corpus, "--out", s(&f.root.join("x"))], Some("abc"));
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("RLSUM_SEED"));
}

#[test]
fn divergence_exits_with_numeric_code() {
    let f = fixture(100);
    let o = rlsum(&[
        "train",
        "--config",
        s(&f.config),
        "--data",
        s(&f.corpus),
        "--set",
        "train.learning_rate=1e300",
        "--out",
        s(&f.root.join("nan")),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn finetune_rejects_nll_and_mismatched_samplers() {
    let f = fixture(150);
    let nll = f.root.join("nll");
    ok(rlsum(&["train", "--config", s(&f.config), "--data", s(&f.corpus), "--out", s(&nll)]));
    let o = rlsum(&["finetune", "--warm-start", s(&nll), "--objective", "nll", "--out", s(&f.root.join("x"))]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let o = rlsum(&[
        "finetune",
        "--warm-start",
        s(&nll),
        "--objective",
        "risk3",
        "--set",
        r#"train.samplers=["argmax","gumbel"]"#,
        "--out",
        s(&f.root.join("y")),
    ]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("train.samplers"), "{}", stderr(&o));
    let o = rlsum(&["finetune", "--warm-start", s(&f.root.join("absent")), "--out", s(&f.root.join("z"))]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

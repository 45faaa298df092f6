use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use rlsum_core::analysis::{
    bootstrap_test, emit_report, length_bucket_rouge, novelty_dat, novelty_profile, write_gnuplot_dat, PairedScores,
    Report, ReportFormat,
};
use rlsum_core::data::{
    clip_lengths, few_shot, generate_synthetic, load_jsonl, split, write_jsonl, Example, Splits, SyntheticTaskSpec,
    TextExample, Vocab,
};
use rlsum_core::model::{Checkpoint, Seq2SeqModel};
use rlsum_core::text_metrics::{rouge_l_f1, TokenId};
use rlsum_core::training::{
    finetune_rl, gamma_sweep, predict, select_gamma, train_nll, validate, write_run_files, Objective, RunResult,
};
use rlsum_core::{Error, Result};

use crate::config::{
    from_value, layered, parse_override, read_json, resolve, write_resolved, DataConfig, RunConfig,
};
use crate::{AnalyzeArgs, Cli, Command, EvaluateArgs, FinetuneArgs, GenDataArgs, GlobalArgs, SweepArgs, TrainArgs};

const CHECKPOINT_FILE: &str = "checkpoint.json";

fn config_error(key: &str, message: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        message: message.into(),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::GenData(a) => gen_data(g, a),
        Command::Train(a) => train(g, a),
        Command::Finetune(a) => finetune(g, a),
        Command::SweepGamma(a) => sweep(g, a),
        Command::Evaluate(a) => evaluate(g, a),
        Command::Analyze(a) => analyze(g, a),
    }
}

/// `--set` pairs first, then dedicated flags, then `--seed`.
fn overrides(g: &GlobalArgs, flags: Vec<(&str, Value)>) -> Result<Vec<(String, Value)>> {
    let mut out = g.set.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>>>()?;
    out.extend(flags.into_iter().map(|(k, v)| (k.to_string(), v)));
    if let Some(seed) = g.seed {
        out.push(("train.seed".into(), seed.into()));
    }
    Ok(out)
}

fn out_dir(g: &GlobalArgs, command: &str) -> PathBuf {
    g.out.clone().unwrap_or_else(|| Path::new("runs").join(command))
}

fn data_flag(data: &Option<PathBuf>) -> Vec<(&'static str, Value)> {
    data.iter().map(|p| ("data.path", json!(p))).collect()
}

fn format_flag(format: &Option<String>) -> Vec<(&'static str, Value)> {
    format.iter().map(|f| ("format", json!(f))).collect()
}

fn gen_data(g: &GlobalArgs, a: GenDataArgs) -> Result<()> {
    let path = a
        .spec
        .as_deref()
        .or(g.config.as_deref())
        .ok_or_else(|| config_error("spec", "gen-data needs --spec <FILE>"))?;
    let mut ov = g.set.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>>>()?;
    if let Some(seed) = g.seed {
        ov.push(("seed".into(), seed.into()));
    }
    let spec: SyntheticTaskSpec = from_value(layered(json!({}), "seed", Some(path), &ov)?)?;
    let out = g.out.clone().unwrap_or_else(|| PathBuf::from("corpus.jsonl"));
    let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    write_resolved(dir, &json!({ "spec": spec, "n": a.n }))?;
    let corpus = generate_synthetic(&spec, a.n)?;
    write_jsonl(&out, &corpus.text_examples())?;
    println!("wrote {} examples to {}", a.n, out.display());
    Ok(())
}

fn load_text(cfg: &DataConfig) -> Result<Splits<TextExample>> {
    let path = cfg
        .path
        .as_deref()
        .ok_or_else(|| config_error("data.path", "no corpus given (use --data or set data.path)"))?;
    let mut loaded = load_jsonl(path, cfg.strict)?;
    for w in &loaded.warnings {
        eprintln!("warning: {w}");
    }
    for issue in &loaded.skipped {
        eprintln!("warning: {}:{}: skipped: {}", path.display(), issue.line, issue.message);
    }
    clip_lengths(&mut loaded.examples, cfg.max_source_tokens, cfg.max_target_tokens);
    split(loaded.examples, cfg.split, cfg.split_seed)
}

fn encode(vocab: &Vocab, xs: &[TextExample]) -> Vec<Example> {
    xs.iter().map(|e| vocab.encode_example(e)).collect()
}

fn encode_splits(vocab: &Vocab, s: &Splits<TextExample>) -> Splits<Example> {
    Splits {
        train: encode(vocab, &s.train),
        dev: encode(vocab, &s.dev),
        test: encode(vocab, &s.test),
    }
}

fn save_run(dir: &Path, model: &Seq2SeqModel, vocab: &Vocab, cfg: &RunConfig, result: &RunResult) -> Result<()> {
    let meta = json!({ "run": cfg, "iterations": result.iterations() });
    model.save(&dir.join(CHECKPOINT_FILE), Some(vocab.tokens()), meta)?;
    write_run_files(dir, result)?;
    let best = result
        .best()
        .map(|b| format!(", best dev loss {:.4} at {}", b.objective_loss, b.iteration))
        .unwrap_or_default();
    println!(
        "{}: {} iterations ({:?}){best}; wrote {}",
        result.objective.as_str(),
        result.iterations(),
        result.stop_reason,
        dir.display()
    );
    Ok(())
}

fn train_split(train: Vec<Example>, cfg: &RunConfig) -> Result<Vec<Example>> {
    if cfg.train.few_shot {
        few_shot(train)
    } else {
        Ok(train)
    }
}

fn train(g: &GlobalArgs, a: TrainArgs) -> Result<()> {
    let mut flags = data_flag(&a.data.data);
    flags.push(("train.objective", json!("nll")));
    if a.few_shot {
        flags.push(("train.few_shot", json!(true)));
    }
    let cfg = resolve(&RunConfig::default(), g.config.as_deref(), &overrides(g, flags)?)?;
    let out = out_dir(g, "train");
    write_resolved(&out, &cfg)?;

    let text = load_text(&cfg.data)?;
    let vocab = Vocab::build(
        text.train.iter().flat_map(|e| [e.source.as_slice(), e.summary.as_slice()]),
        cfg.data.max_vocab,
    )?;
    let data = encode_splits(&vocab, &text);
    let train = train_split(data.train, &cfg)?;
    let mut model = Seq2SeqModel::init(vocab.len(), cfg.model.hidden, cfg.train.seed)?;
    let result = train_nll(&mut model, &train, &data.dev, &cfg.train)?;
    save_run(&out, &model, &vocab, &cfg, &result)
}

struct Warm {
    checkpoint: Checkpoint,
    vocab: Vocab,
}

fn load_warm(path: &Path) -> Result<Warm> {
    let file = if path.is_dir() { path.join(CHECKPOINT_FILE) } else { path.to_path_buf() };
    let checkpoint = Seq2SeqModel::load(&file)?;
    let tokens = checkpoint.vocab.clone().ok_or_else(|| Error::Parse {
        path: file.clone(),
        line: 0,
        message: "checkpoint carries no vocabulary".into(),
    })?;
    let vocab = Vocab::from_tokens(tokens).map_err(|e| Error::Parse {
        path: file,
        line: 0,
        message: e.to_string(),
    })?;
    Ok(Warm { checkpoint, vocab })
}

/// Defaults for runs that start from a checkpoint: its data section (so the
/// split matches) and, when known, its iteration count.
fn warm_defaults(warm: &Warm) -> Result<RunConfig> {
    let mut d = RunConfig::default();
    if let Some(data) = warm.checkpoint.config.pointer("/run/data") {
        d.data = from_value(data.clone())?;
    }
    if let Some(n) = warm.checkpoint.config.get("iterations").and_then(Value::as_u64) {
        d.train.max_iterations = n as usize;
    }
    d.train.objective = Objective::RwbHinge;
    Ok(d)
}

fn finetune(g: &GlobalArgs, a: FinetuneArgs) -> Result<()> {
    let warm = load_warm(&a.warm_start)?;
    let mut flags = data_flag(&a.data.data);
    if let Some(o) = &a.objective {
        flags.push(("train.objective", json!(o)));
    }
    if let Some(gamma) = a.gamma {
        flags.push(("train.gamma", json!(gamma)));
    }
    if a.few_shot {
        flags.push(("train.few_shot", json!(true)));
    }
    let mut defaults = warm_defaults(&warm)?;
    defaults.train.max_iterations = RunConfig::default().train.max_iterations;
    let cfg = resolve(&defaults, g.config.as_deref(), &overrides(g, flags)?)?;
    let out = out_dir(g, "finetune");
    write_resolved(&out, &cfg)?;

    let data = encode_splits(&warm.vocab, &load_text(&cfg.data)?);
    let train = train_split(data.train, &cfg)?;
    let mut model = warm.checkpoint.model.clone();
    let result = finetune_rl(&mut model, &train, &data.dev, &cfg.train)?;
    save_run(&out, &model, &warm.vocab, &cfg, &result)
}

fn sweep(g: &GlobalArgs, a: SweepArgs) -> Result<()> {
    let warm = load_warm(&a.warm_start)?;
    let mut flags = data_flag(&a.data.data);
    flags.extend(format_flag(&a.format));
    if let Some(grid) = &a.grid {
        flags.push(("sweep.grid", json!(grid)));
    }
    let cfg = resolve(&warm_defaults(&warm)?, g.config.as_deref(), &overrides(g, flags)?)?;
    let out = out_dir(g, "sweep-gamma");
    write_resolved(&out, &cfg)?;

    let data = encode_splits(&warm.vocab, &load_text(&cfg.data)?);
    let train = train_split(data.train, &cfg)?;
    let rows = gamma_sweep(&warm.checkpoint.model, &train, &data.dev, &cfg.sweep.grid, &cfg.train)?;
    let mut report = Report::new(["gamma", "rouge1", "rouge2", "rougel", "loss"]);
    for r in &rows {
        report.push(
            format!("gamma={}", r.gamma),
            [r.gamma, r.rouge1, r.rouge2, r.rougel, r.loss].map(Some).to_vec(),
        )?;
    }
    emit_report(&report, &out.join(report_name("sweep", cfg.format)), cfg.format)?;
    let best = select_gamma(&rows).expect("grid is non-empty");
    let path = out.join("selected.json");
    fs::write(&path, serde_json::to_string_pretty(&json!({ "gamma": best.gamma, "rougel": best.rougel })).unwrap())
        .map_err(|e| Error::io(&path, e))?;
    println!("selected gamma {} (dev ROUGE-L {:.4}); wrote {}", best.gamma, best.rougel, out.display());
    Ok(())
}

fn report_name(stem: &str, format: ReportFormat) -> String {
    match format {
        ReportFormat::Csv => format!("{stem}.csv"),
        ReportFormat::Json => format!("{stem}.json"),
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ScoredExample {
    id: String,
    source: Vec<TokenId>,
    reference: Vec<TokenId>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SystemScores {
    name: String,
    predictions: Vec<Vec<TokenId>>,
    rouge_l: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ScoresFile {
    examples: Vec<ScoredExample>,
    systems: Vec<SystemScores>,
}

fn evaluate(g: &GlobalArgs, a: EvaluateArgs) -> Result<()> {
    let mut systems = Vec::new();
    for raw in &a.systems {
        let (name, path) = raw
            .split_once('=')
            .filter(|(n, p)| !n.is_empty() && !p.is_empty())
            .ok_or_else(|| config_error("system", format!("expected NAME=PATH, got `{raw}`")))?;
        if systems.iter().any(|(n, _): &(String, Warm)| n == name) {
            return Err(config_error("system", format!("duplicate system name `{name}`")));
        }
        systems.push((name.to_string(), load_warm(Path::new(path))?));
    }
    let vocab = systems[0].1.vocab.clone();
    if let Some((name, _)) = systems.iter().find(|(_, w)| w.vocab != vocab) {
        return Err(config_error("system", format!("`{name}` uses a different vocabulary")));
    }
    let mut flags = data_flag(&a.data.data);
    flags.extend(format_flag(&a.format));
    let cfg = resolve(&warm_defaults(&systems[0].1)?, g.config.as_deref(), &overrides(g, flags)?)?;
    let out = out_dir(g, "evaluate");
    write_resolved(&out, &cfg)?;

    let test = encode_splits(&vocab, &load_text(&cfg.data)?).test;
    let mut report = Report::new(["rouge1", "rouge2", "rougel", "loss"]);
    let mut scored = Vec::new();
    for (name, warm) in &systems {
        let m = validate(&warm.checkpoint.model, &test)?;
        report.push(name.clone(), [m.rouge1, m.rouge2, m.rougel, m.loss].map(Some).to_vec())?;
        let predictions = predict(&warm.checkpoint.model, &test)?;
        let rouge_l = test
            .iter()
            .zip(&predictions)
            .map(|(ex, p)| rouge_l_f1(&ex.summary, p).f1)
            .collect();
        scored.push(SystemScores {
            name: name.clone(),
            predictions,
            rouge_l,
        });
    }
    emit_report(&report, &out.join(report_name("metrics", cfg.format)), cfg.format)?;
    let file = ScoresFile {
        examples: test
            .iter()
            .map(|e| ScoredExample {
                id: e.id.clone(),
                source: e.source.tokens().to_vec(),
                reference: e.summary.tokens().to_vec(),
            })
            .collect(),
        systems: scored,
    };
    let path = out.join("scores.json");
    fs::write(&path, serde_json::to_string(&file).expect("scores serialize")).map_err(|e| Error::io(&path, e))?;
    println!("scored {} systems on {} test examples; wrote {}", systems.len(), test.len(), out.display());
    Ok(())
}

fn analyze(g: &GlobalArgs, a: AnalyzeArgs) -> Result<()> {
    let mut flags = format_flag(&a.format);
    if let Some(b) = &a.baseline {
        flags.push(("analysis.baseline", json!(b)));
    }
    let cfg = resolve(&RunConfig::default(), g.config.as_deref(), &overrides(g, flags)?)?;
    let out = out_dir(g, "analyze");
    write_resolved(&out, &cfg)?;

    let scores: ScoresFile = serde_json::from_value(read_json(&a.scores)?).map_err(|e| Error::Parse {
        path: a.scores.clone(),
        line: 0,
        message: e.to_string(),
    })?;
    let baseline = scores
        .systems
        .iter()
        .find(|s| s.name == cfg.analysis.baseline)
        .ok_or_else(|| {
            config_error(
                "analysis.baseline",
                format!("no system named `{}` in {}", cfg.analysis.baseline, a.scores.display()),
            )
        })?;

    let mut sig = Report::new(["mean", "baseline_mean", "difference", "p_value", "significant"]);
    for s in scores.systems.iter().filter(|s| s.name != baseline.name) {
        let paired = PairedScores::new(s.rouge_l.clone(), baseline.rouge_l.clone(), "rouge-l")?;
        let r = bootstrap_test(&paired, cfg.analysis.resamples, cfg.analysis.alpha, cfg.train.seed)?;
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        sig.push(
            s.name.clone(),
            vec![
                Some(mean(&s.rouge_l)),
                Some(mean(&baseline.rouge_l)),
                Some(r.mean_difference),
                Some(r.p_value),
                Some(if r.significant { 1.0 } else { 0.0 }),
            ],
        )?;
    }
    emit_report(&sig, &out.join(report_name("significance", cfg.format)), cfg.format)?;

    let sources: Vec<Vec<TokenId>> = scores.examples.iter().map(|e| e.source.clone()).collect();
    let refs: Vec<Vec<TokenId>> = scores.examples.iter().map(|e| e.reference.clone()).collect();
    let per_system: Vec<(String, Vec<Vec<TokenId>>)> =
        scores.systems.iter().map(|s| (s.name.clone(), s.predictions.clone())).collect();
    let novelty = novelty_profile(&sources, &per_system)?;
    let mut nov = Report::new(novelty.orders.iter().map(|n| format!("novelty_{n}")));
    for s in &scores.systems {
        nov.push(s.name.clone(), novelty.systems[&s.name].iter().copied().map(Some).collect())?;
    }
    emit_report(&nov, &out.join(report_name("novelty", cfg.format)), cfg.format)?;
    novelty_dat(&novelty, &out.join("novelty.dat"))?;

    let buckets: Vec<_> = scores
        .systems
        .iter()
        .map(|s| length_bucket_rouge(&refs, &s.predictions, &cfg.analysis.bucket_edges))
        .collect::<Result<_>>()?;
    let labels: Vec<String> = buckets[0].iter().map(|b| b.label()).collect();
    let mut cols = Vec::new();
    for l in &labels {
        cols.push(format!("rougel_{l}"));
        cols.push(format!("count_{l}"));
    }
    let mut rep = Report::new(cols);
    for (s, bs) in scores.systems.iter().zip(&buckets) {
        rep.push(
            s.name.clone(),
            bs.iter().flat_map(|b| [b.mean_rouge_l, Some(b.count as f64)]).collect(),
        )?;
    }
    emit_report(&rep, &out.join(report_name("length_buckets", cfg.format)), cfg.format)?;
    let mut dat_cols = vec!["count"];
    dat_cols.extend(scores.systems.iter().map(|s| s.name.as_str()));
    let rows: Vec<_> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let mut v = vec![Some(buckets[0][i].count as f64)];
            v.extend(buckets.iter().map(|bs| bs[i].mean_rouge_l));
            (l.clone(), v)
        })
        .collect();
    write_gnuplot_dat(&out.join("length_buckets.dat"), &dat_cols, &rows)?;
    println!("analyzed {} systems against `{}`; wrote {}", scores.systems.len(), baseline.name, out.display());
    Ok(())
}

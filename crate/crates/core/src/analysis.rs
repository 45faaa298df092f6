//! Evaluation helpers: paired bootstrap significance, n-gram novelty
//! profiles, length-bucketed ROUGE-L, and report files.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text_metrics::{ngram_novelty, rouge_l_f1, TokenId};

pub const DEFAULT_RESAMPLES: usize = 10_000;
pub const MIN_RESAMPLES: usize = 1000;
pub const DEFAULT_ALPHA: f64 = 0.05;
pub const NOVELTY_ORDERS: [usize; 3] = [1, 2, 3];
pub const DEFAULT_BUCKET_EDGES: [usize; 4] = [4, 8, 12, 16];

/// Aligned per-example scores of a candidate system `a` and a baseline `b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedScores {
    system_a: Vec<f64>,
    system_b: Vec<f64>,
    metric: String,
}

impl PairedScores {
    pub fn new(system_a: Vec<f64>, system_b: Vec<f64>, metric: impl Into<String>) -> Result<Self> {
        if system_a.len() != system_b.len() {
            return Err(Error::invalid(format!(
                "paired scores differ in length: {} vs {}",
                system_a.len(),
                system_b.len()
            )));
        }
        if system_a.len() < 2 {
            return Err(Error::invalid("paired scores need at least two examples"));
        }
        if let Some(v) = system_a.iter().chain(&system_b).find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("score {v} outside [0, 1]")));
        }
        Ok(PairedScores {
            system_a,
            system_b,
            metric: metric.into(),
        })
    }

    pub fn system_a(&self) -> &[f64] {
        &self.system_a
    }

    pub fn system_b(&self) -> &[f64] {
        &self.system_b
    }

    pub fn metric(&self) -> &str {
        &self.metric
    }

    pub fn len(&self) -> usize {
        self.system_a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.system_a.is_empty()
    }

    pub fn mean_difference(&self) -> f64 {
        mean(&self.system_a) - mean(&self.system_b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub p_value: f64,
    pub significant: bool,
    pub resamples: usize,
    pub mean_difference: f64,
}

/// One-sided paired bootstrap: `p` is the fraction of index resamples in
/// which mean(a) ≤ mean(b). Significant iff `p < alpha`.
pub fn bootstrap_test(scores: &PairedScores, resamples: usize, alpha: f64, seed: u64) -> Result<BootstrapResult> {
    if resamples < MIN_RESAMPLES {
        return Err(Error::invalid(format!(
            "need at least {MIN_RESAMPLES} resamples, got {resamples}"
        )));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let diffs: Vec<f64> = scores.system_a.iter().zip(&scores.system_b).map(|(a, b)| a - b).collect();
    let n = diffs.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut not_better = 0usize;
    for _ in 0..resamples {
        let total: f64 = (0..n).map(|_| diffs[rng.gen_range(0..n)]).sum();
        if total <= 0.0 {
            not_better += 1;
        }
    }
    let p_value = not_better as f64 / resamples as f64;
    Ok(BootstrapResult {
        p_value,
        significant: p_value < alpha,
        resamples,
        mean_difference: scores.mean_difference(),
    })
}

/// Mean unique-n-gram novelty for n = 1, 2, 3, per system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoveltyReport {
    pub orders: Vec<usize>,
    /// system name → one mean per entry of `orders`
    pub systems: BTreeMap<String, Vec<f64>>,
}

impl NoveltyReport {
    pub fn get(&self, system: &str, n: usize) -> Option<f64> {
        let i = self.orders.iter().position(|&o| o == n)?;
        self.systems.get(system).map(|v| v[i])
    }
}

pub fn novelty_profile(
    sources: &[Vec<TokenId>],
    summaries_per_system: &[(String, Vec<Vec<TokenId>>)],
) -> Result<NoveltyReport> {
    let mut systems = BTreeMap::new();
    for (name, summaries) in summaries_per_system {
        if summaries.len() != sources.len() {
            return Err(Error::invalid(format!(
                "system `{name}` has {} summaries for {} sources",
                summaries.len(),
                sources.len()
            )));
        }
        let mut means = Vec::with_capacity(NOVELTY_ORDERS.len());
        for n in NOVELTY_ORDERS {
            let mut total = 0.0;
            for (src, summ) in sources.iter().zip(summaries) {
                total += ngram_novelty(src, summ, n)?;
            }
            means.push(if sources.is_empty() { 0.0 } else { total / sources.len() as f64 });
        }
        systems.insert(name.clone(), means);
    }
    Ok(NoveltyReport {
        orders: NOVELTY_ORDERS.to_vec(),
        systems,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthBucket {
    /// Inclusive lower bound on reference length.
    pub lower: usize,
    /// Exclusive upper bound; `None` for the open last bucket.
    pub upper: Option<usize>,
    pub count: usize,
    pub mean_rouge_l: Option<f64>,
}

impl LengthBucket {
    pub fn label(&self) -> String {
        match self.upper {
            Some(u) => format!("{}-{}", self.lower, u - 1),
            None => format!("{}+", self.lower),
        }
    }
}

/// Buckets `[0,e0) [e0,e1) … [e_last,∞)` over reference length, with the
/// mean ROUGE-L F1 of the matching summaries.
pub fn length_bucket_rouge(
    references: &[Vec<TokenId>],
    summaries: &[Vec<TokenId>],
    bucket_edges: &[usize],
) -> Result<Vec<LengthBucket>> {
    if references.len() != summaries.len() {
        return Err(Error::invalid(format!(
            "{} references for {} summaries",
            references.len(),
            summaries.len()
        )));
    }
    if bucket_edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid(format!(
            "bucket edges must be strictly increasing: {bucket_edges:?}"
        )));
    }
    let mut sums = vec![(0usize, 0.0f64); bucket_edges.len() + 1];
    for (r, s) in references.iter().zip(summaries) {
        let b = bucket_edges.partition_point(|&e| e <= r.len());
        sums[b].0 += 1;
        sums[b].1 += rouge_l_f1(r, s).f1;
    }
    Ok(sums
        .into_iter()
        .enumerate()
        .map(|(i, (count, total))| LengthBucket {
            lower: if i == 0 { 0 } else { bucket_edges[i - 1] },
            upper: bucket_edges.get(i).copied(),
            count,
            mean_rouge_l: (count > 0).then(|| total / count as f64),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(Error::config("format", format!("expected csv or json, got `{other}`"))),
        }
    }
}

/// A table of per-system metrics. Columns keep insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    columns: Vec<String>,
    rows: Vec<(String, Vec<Option<f64>>)>,
}

impl Report {
    pub fn new<S: Into<String>>(columns: impl IntoIterator<Item = S>) -> Self {
        Report {
            columns: columns.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, system: impl Into<String>, values: Vec<Option<f64>>) -> Result<()> {
        if values.len() != self.columns.len() {
            return Err(Error::invalid(format!(
                "row has {} values for {} columns",
                values.len(),
                self.columns.len()
            )));
        }
        let system = system.into();
        if self.rows.iter().any(|(s, _)| *s == system) {
            return Err(Error::invalid(format!("duplicate system `{system}`")));
        }
        self.rows.push((system, values));
        Ok(())
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn rows(&self) -> &[(String, Vec<Option<f64>>)] {
        &self.rows
    }

    /// Systems sorted by `column`, best first; ties keep insertion order.
    pub fn ranking(&self, column: &str) -> Option<Vec<(&str, f64)>> {
        let i = self.columns.iter().position(|c| c == column)?;
        let mut out: Vec<(&str, f64)> = self
            .rows
            .iter()
            .filter_map(|(s, v)| v[i].map(|x| (s.as_str(), x)))
            .collect();
        out.sort_by(|a, b| b.1.total_cmp(&a.1));
        Some(out)
    }
}

fn fixed4(x: f64) -> String {
    format!("{x:.4}")
}

fn round4(x: f64) -> f64 {
    fixed4(x).parse().expect("formatted float parses")
}

/// Writes `report` as CSV (header `system,<columns…>`) or as a JSON object
/// keyed by system name. Floats carry four decimals; missing values are
/// empty cells or `null`.
pub fn emit_report(report: &Report, path: &Path, format: ReportFormat) -> Result<()> {
    let body = match format {
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let header = std::iter::once("system").chain(report.columns.iter().map(String::as_str));
            w.write_record(header).map_err(|e| csv_io(path, e))?;
            for (system, values) in &report.rows {
                let cells = std::iter::once(system.clone())
                    .chain(values.iter().map(|v| v.map(fixed4).unwrap_or_default()));
                w.write_record(cells).map_err(|e| csv_io(path, e))?;
            }
            w.into_inner().map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?
        }
        ReportFormat::Json => {
            let mut root = serde_json::Map::new();
            for (system, values) in &report.rows {
                let mut obj = serde_json::Map::new();
                for (col, v) in report.columns.iter().zip(values) {
                    obj.insert(col.clone(), v.map(round4).into());
                }
                root.insert(system.clone(), obj.into());
            }
            let mut s = serde_json::to_string_pretty(&serde_json::Value::Object(root)).expect("plain json");
            s.push('\n');
            s.into_bytes()
        }
    };
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

/// Whitespace-separated data file for gnuplot: a `#` header line, then one
/// row per label. Missing values are written as `NaN`.
pub fn write_gnuplot_dat(path: &Path, columns: &[&str], rows: &[(String, Vec<Option<f64>>)]) -> Result<()> {
    let mut out = Vec::new();
    let io = |e| Error::io(path, e);
    writeln!(out, "# label {}", columns.join(" ")).map_err(io)?;
    for (label, values) in rows {
        write!(out, "{label}").map_err(io)?;
        for v in values {
            match v {
                Some(x) => write!(out, " {}", fixed4(*x)),
                None => write!(out, " NaN"),
            }
            .map_err(io)?;
        }
        writeln!(out).map_err(io)?;
    }
    fs::write(path, out).map_err(io)
}

/// Novelty profile as a gnuplot table: one row per n, one column per system.
pub fn novelty_dat(report: &NoveltyReport, path: &Path) -> Result<()> {
    let names: Vec<&str> = report.systems.keys().map(String::as_str).collect();
    let rows: Vec<_> = report
        .orders
        .iter()
        .enumerate()
        .map(|(i, n)| (n.to_string(), report.systems.values().map(|v| Some(v[i])).collect()))
        .collect();
    write_gnuplot_dat(path, &names, &rows)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn paired_scores_validation() {
        assert!(PairedScores::new(vec![0.1, 0.2], vec![0.3], "rouge-l").is_err());
        assert!(PairedScores::new(vec![0.1], vec![0.3], "rouge-l").is_err());
        assert!(PairedScores::new(vec![0.1, 1.2], vec![0.3, 0.2], "rouge-l").is_err());
        assert!(PairedScores::new(vec![0.1, 0.2], vec![0.3, 0.2], "rouge-l").is_ok());
    }

    #[test]
    fn bootstrap_basics() {
        let a = vec![0.6, 0.7, 0.8, 0.65, 0.75, 0.7];
        let b = vec![0.4, 0.5, 0.45, 0.5, 0.55, 0.4];
        let s = PairedScores::new(a.clone(), b.clone(), "rouge-l").unwrap();
        let r = bootstrap_test(&s, 2000, 0.05, 1).unwrap();
        assert_eq!(r.p_value, 0.0);
        assert!(r.significant);
        let rev = PairedScores::new(b, a, "rouge-l").unwrap();
        assert_eq!(bootstrap_test(&rev, 2000, 0.05, 1).unwrap().p_value, 1.0);
        assert_eq!(bootstrap_test(&s, 2000, 0.05, 1).unwrap(), r);
        assert!(bootstrap_test(&s, 999, 0.05, 1).is_err());
    }

    #[test]
    fn identical_systems_never_significant() {
        let a = vec![0.3, 0.5, 0.1, 0.9];
        let s = PairedScores::new(a.clone(), a, "rouge-l").unwrap();
        let r = bootstrap_test(&s, 1000, 0.05, 3).unwrap();
        assert_eq!(r.p_value, 1.0);
        assert!(!r.significant);
    }

    #[test]
    fn extractive_novelty_is_zero() {
        let src = vec![vec![5, 6, 7, 8, 9], vec![10, 11, 12]];
        let summ = vec![vec![6, 7, 8], vec![10, 11]];
        let rep = novelty_profile(&src, &[("ext".into(), summ)]).unwrap();
        assert_eq!(rep.orders, vec![1, 2, 3]);
        assert_eq!(rep.systems["ext"], vec![0.0, 0.0, 0.0]);
        assert!(novelty_profile(&src, &[("bad".into(), vec![vec![1]])]).is_err());
    }

    #[test]
    fn buckets_partition_and_report_empty() {
        let refs = vec![vec![1; 3], vec![1; 5], vec![1; 5], vec![1; 20]];
        let hyps = refs.clone();
        let b = length_bucket_rouge(&refs, &hyps, &DEFAULT_BUCKET_EDGES).unwrap();
        assert_eq!(b.len(), 5);
        assert_eq!(b.iter().map(|x| x.count).sum::<usize>(), 4);
        assert_eq!(b[1].count, 2);
        assert_eq!(b[2].count, 0);
        assert_eq!(b[2].mean_rouge_l, None);
        assert_eq!(b[4].label(), "16+");
        assert_eq!(b[1].label(), "4-7");
        assert!(length_bucket_rouge(&refs, &hyps, &[8, 4]).is_err());
        let same = length_bucket_rouge(&[vec![2; 6], vec![3; 6]], &[vec![2; 6], vec![1; 6]], &DEFAULT_BUCKET_EDGES).unwrap();
        assert_eq!(same.iter().filter(|x| x.count > 0).count(), 1);
        assert_eq!(same[1].mean_rouge_l, Some(0.5));
    }

    fn sample_report() -> Report {
        let mut r = Report::new(["rouge1", "rouge2", "rougel"]);
        r.push("nll", vec![Some(0.123456), Some(0.5), None]).unwrap();
        r.push("risk3", vec![Some(0.2), Some(0.33333), Some(0.9)]).unwrap();
        r
    }

    #[test]
    fn csv_report_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        emit_report(&sample_report(), &p, ReportFormat::Csv).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(
            text,
            "system,rouge1,rouge2,rougel\nnll,0.1235,0.5000,\nrisk3,0.2000,0.3333,0.9000\n"
        );
    }

    #[test]
    fn json_report_keyed_by_system() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.json");
        emit_report(&sample_report(), &p, ReportFormat::Json).unwrap();
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&p).unwrap()).unwrap();
        assert_eq!(v["nll"]["rouge1"], 0.1235);
        assert!(v["nll"]["rougel"].is_null());
        assert_eq!(v["risk3"]["rouge2"], 0.3333);
        let missing = dir.path().join("no/such/dir/r.json");
        assert!(matches!(emit_report(&sample_report(), &missing, ReportFormat::Json), Err(Error::Io { .. })));
    }

    #[test]
    fn ranking_orders_best_first() {
        let r = sample_report();
        let rank = r.ranking("rouge1").unwrap();
        assert_eq!(rank[0].0, "risk3");
        assert_eq!(r.ranking("rougel").unwrap().len(), 1);
        assert!(r.ranking("bleu").is_none());
    }

    #[test]
    fn gnuplot_file_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("n.dat");
        let rep = novelty_profile(&[vec![1, 2]], &[("a".into(), vec![vec![1, 3]]), ("b".into(), vec![vec![1, 2]])]).unwrap();
        novelty_dat(&rep, &p).unwrap();
        assert_eq!(
            fs::read_to_string(&p).unwrap(),
            "# label a b\n1 0.5000 0.0000\n2 1.0000 0.0000\n3 0.0000 0.0000\n"
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn shifting_a_up_never_raises_p(
            pairs in prop::collection::vec((0.0f64..0.8, 0.0f64..0.8), 2..30),
            delta in 0.01f64..0.2,
            seed in 0u64..1000,
        ) {
            let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let shifted: Vec<f64> = a.iter().map(|x| x + delta).collect();
            let p0 = bootstrap_test(&PairedScores::new(a, b.clone(), "m").unwrap(), 1000, 0.05, seed).unwrap().p_value;
            let p1 = bootstrap_test(&PairedScores::new(shifted, b, "m").unwrap(), 1000, 0.05, seed).unwrap().p_value;
            prop_assert!(p1 <= p0);
        }

        #[test]
        fn bucket_means_ignore_order(
            data in prop::collection::vec((prop::collection::vec(0u32..6, 1..20), prop::collection::vec(0u32..6, 0..20)), 1..25),
            seed in 0u64..100,
        ) {
            use rand::seq::SliceRandom;
            let (refs, hyps): (Vec<_>, Vec<_>) = data.iter().cloned().unzip();
            let mut shuffled = data;
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let (refs2, hyps2): (Vec<_>, Vec<_>) = shuffled.into_iter().unzip();
            let a = length_bucket_rouge(&refs, &hyps, &DEFAULT_BUCKET_EDGES).unwrap();
            let b = length_bucket_rouge(&refs2, &hyps2, &DEFAULT_BUCKET_EDGES).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert_eq!(x.count, y.count);
                match (x.mean_rouge_l, y.mean_rouge_l) {
                    (Some(p), Some(q)) => prop_assert!((p - q).abs() < 1e-12),
                    (p, q) => prop_assert_eq!(p, q),
                }
            }
        }
    }
}

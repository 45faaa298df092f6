//! Corpora: synthetic summarization tasks, JSONL ingestion, vocabularies and
//! deterministic train/dev/test splits.
//!
//! Synthetic content words are named `w0`, `w1`, ... and grouped into
//! synonym classes of `synonym_class_size` consecutive words. Sources only
//! use the first (canonical) member of each class; the other members show
//! up only when paraphrase noise rewrites a summary token, so noisy
//! references contain words the source never mentions.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{RESERVED_TOKENS, UNK_ID};
use crate::text_metrics::{tokenize, TokenId, TokenSeq};

pub const RESERVED_NAMES: [&str; RESERVED_TOKENS] = ["<pad>", "<bos>", "<eos>", "<unk>"];
pub const DEFAULT_MAX_SOURCE_TOKENS: usize = 64;
pub const DEFAULT_MAX_TARGET_TOKENS: usize = 16;
pub const FEW_SHOT_EXAMPLES: usize = 1000;

/// Token ↔ id mapping with ids 0–3 reserved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED_TOKENS
            || tokens.iter().zip(RESERVED_NAMES).any(|(t, r)| t != r)
        {
            return Err(Error::invalid("vocabulary must start with <pad> <bos> <eos> <unk>"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary entry `{t}`")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    /// Most frequent tokens first, ties broken lexicographically, capped so
    /// the whole vocabulary (reserved ids included) has at most `max_size` entries.
    pub fn build<'a, I>(texts: I, max_size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        if max_size <= RESERVED_TOKENS {
            return Err(Error::invalid(format!(
                "max vocabulary size must be at least {}, got {max_size}",
                RESERVED_TOKENS + 1
            )));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for text in texts {
            for tok in text {
                *counts.entry(tok.as_str()).or_insert(0) += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::invalid("cannot build a vocabulary from an empty corpus"));
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(t, _)| !RESERVED_NAMES.contains(t))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let mut tokens: Vec<String> = RESERVED_NAMES.iter().map(|s| s.to_string()).collect();
        tokens.extend(
            ranked
                .into_iter()
                .take(max_size - RESERVED_TOKENS)
                .map(|(t, _)| t.to_string()),
        );
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn encode(&self, words: &[String]) -> TokenSeq {
        let ids = words.iter().map(|w| self.id(w)).collect();
        TokenSeq::new(ids, self.len()).expect("ids come from this vocabulary")
    }

    pub fn decode(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter()
            .map(|&i| {
                self.tokens
                    .get(i as usize)
                    .cloned()
                    .unwrap_or_else(|| RESERVED_NAMES[UNK_ID as usize].to_string())
            })
            .collect()
    }

    pub fn encode_example(&self, ex: &TextExample) -> Example {
        Example {
            id: ex.id.clone(),
            source: self.encode(&ex.source),
            summary: self.encode(&ex.summary),
        }
    }
}

/// A tokenized but not yet id-encoded document/summary pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextExample {
    pub id: String,
    pub source: Vec<String>,
    pub summary: Vec<String>,
}

/// An id-encoded (x, y*) pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub source: TokenSeq,
    pub summary: TokenSeq,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SyntheticRule {
    /// Summary = the first `k` source tokens.
    LeadK { k: usize },
    /// Summary = the source tokens drawn from the first `keyword_classes`
    /// synonym classes, in source order.
    KeywordExtract { keyword_classes: usize },
    /// Summary = the distinct source tokens sorted by id.
    SortedUnique,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    /// Number of content words (the model vocabulary adds 4 reserved ids).
    pub vocab_size: usize,
    pub source_len_min: usize,
    pub source_len_max: usize,
    pub rule: SyntheticRule,
    pub noise_rate: f64,
    #[serde(default = "default_class_size")]
    pub synonym_class_size: usize,
    #[serde(default = "default_max_target")]
    pub max_target_tokens: usize,
    pub seed: u64,
}

fn default_class_size() -> usize {
    2
}

fn default_max_target() -> usize {
    DEFAULT_MAX_TARGET_TOKENS
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let classes = self.classes();
        if self.synonym_class_size == 0 || classes == 0 {
            return Err(Error::invalid("vocabulary too small for the synonym class size"));
        }
        if self.source_len_min == 0 || self.source_len_min > self.source_len_max {
            return Err(Error::invalid(format!(
                "source length range {}..={} is empty",
                self.source_len_min, self.source_len_max
            )));
        }
        if self.source_len_max > DEFAULT_MAX_SOURCE_TOKENS {
            return Err(Error::invalid(format!(
                "source length {} exceeds the cap of {DEFAULT_MAX_SOURCE_TOKENS}",
                self.source_len_max
            )));
        }
        if !(0.0..0.5).contains(&self.noise_rate) {
            return Err(Error::invalid(format!("noise_rate must lie in [0, 0.5), got {}", self.noise_rate)));
        }
        if self.noise_rate > 0.0 && self.synonym_class_size < 2 {
            return Err(Error::invalid("paraphrase noise needs synonym classes of size ≥ 2"));
        }
        if self.max_target_tokens == 0 {
            return Err(Error::invalid("max_target_tokens must be positive"));
        }
        match self.rule {
            SyntheticRule::LeadK { k } if k == 0 || k > self.source_len_min => Err(Error::invalid(format!(
                "lead_k needs 1 ≤ k ≤ minimum source length, got k={k}"
            ))),
            SyntheticRule::KeywordExtract { keyword_classes } if keyword_classes == 0 || keyword_classes >= classes => {
                Err(Error::invalid(format!(
                    "keyword_classes must lie in 1..{classes}, got {keyword_classes}"
                )))
            }
            _ => Ok(()),
        }
    }

    fn classes(&self) -> usize {
        if self.synonym_class_size == 0 {
            0
        } else {
            self.vocab_size / self.synonym_class_size
        }
    }

    /// Model vocabulary size: content words plus reserved ids.
    pub fn model_vocab_size(&self) -> usize {
        self.vocab_size + RESERVED_TOKENS
    }

    pub fn vocab(&self) -> Vocab {
        let mut tokens: Vec<String> = RESERVED_NAMES.iter().map(|s| s.to_string()).collect();
        tokens.extend((0..self.vocab_size).map(|i| format!("w{i}")));
        Vocab::from_tokens(tokens).expect("synthetic names are unique")
    }

    fn word_id(&self, content: usize) -> TokenId {
        (content + RESERVED_TOKENS) as TokenId
    }

    fn canonical(&self, class: usize) -> usize {
        class * self.synonym_class_size
    }

    fn class_of(&self, id: TokenId) -> usize {
        (id as usize - RESERVED_TOKENS) / self.synonym_class_size
    }

    /// What a noise-free rule-following summarizer outputs for `source`.
    pub fn oracle_summary(&self, source: &[TokenId]) -> Vec<TokenId> {
        let mut out: Vec<TokenId> = match self.rule {
            SyntheticRule::LeadK { k } => source.iter().take(k).copied().collect(),
            SyntheticRule::KeywordExtract { keyword_classes } => source
                .iter()
                .copied()
                .filter(|&t| self.class_of(t) < keyword_classes)
                .collect(),
            SyntheticRule::SortedUnique => {
                let mut v = source.to_vec();
                v.sort_unstable();
                v.dedup();
                v
            }
        };
        out.truncate(self.max_target_tokens);
        out
    }
}

/// A generated corpus and the vocabulary its ids refer to.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub vocab: Vocab,
    pub examples: Vec<Example>,
}

impl SyntheticCorpus {
    pub fn text_examples(&self) -> Vec<TextExample> {
        self.examples
            .iter()
            .map(|e| TextExample {
                id: e.id.clone(),
                source: self.vocab.decode(&e.source),
                summary: self.vocab.decode(&e.summary),
            })
            .collect()
    }
}

pub fn generate_synthetic(spec: &SyntheticTaskSpec, n_examples: usize) -> Result<SyntheticCorpus> {
    spec.validate()?;
    if n_examples == 0 {
        return Err(Error::invalid("need at least one example"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let classes = spec.classes();
    let v = spec.model_vocab_size();
    let mut examples = Vec::with_capacity(n_examples);
    for i in 0..n_examples {
        let len = rng.gen_range(spec.source_len_min..=spec.source_len_max);
        let mut source: Vec<TokenId> = (0..len)
            .map(|_| spec.word_id(spec.canonical(rng.gen_range(0..classes))))
            .collect();
        if let SyntheticRule::KeywordExtract { keyword_classes } = spec.rule {
            if !source.iter().any(|&t| spec.class_of(t) < keyword_classes) {
                let pos = rng.gen_range(0..len);
                source[pos] = spec.word_id(spec.canonical(rng.gen_range(0..keyword_classes)));
            }
        }
        let mut summary = spec.oracle_summary(&source);
        for tok in summary.iter_mut() {
            if rng.gen::<f64>() < spec.noise_rate {
                let class = spec.class_of(*tok);
                let offset = rng.gen_range(1..spec.synonym_class_size);
                let member = (*tok as usize - RESERVED_TOKENS - spec.canonical(class) + offset)
                    % spec.synonym_class_size;
                *tok = spec.word_id(spec.canonical(class) + member);
            }
        }
        examples.push(Example {
            id: format!("syn-{i:06}"),
            source: TokenSeq::new(source, v)?,
            summary: TokenSeq::new(summary, v)?,
        });
    }
    Ok(SyntheticCorpus {
        vocab: spec.vocab(),
        examples,
    })
}

#[derive(Serialize)]
struct JsonlOut<'a> {
    id: &'a str,
    source: String,
    summary: String,
}

#[derive(Deserialize)]
struct JsonlIn {
    id: Option<String>,
    source: String,
    summary: String,
}

pub fn write_jsonl(path: &Path, examples: &[TextExample]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut out = Vec::new();
    for ex in examples {
        let line = serde_json::to_string(&JsonlOut {
            id: &ex.id,
            source: ex.source.join(" "),
            summary: ex.summary.join(" "),
        })
        .expect("plain strings serialize");
        out.extend_from_slice(line.as_bytes());
        out.push(b'\n');
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(path, e))
}

/// A line that failed the schema and was skipped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineIssue {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct LoadedCorpus {
    pub examples: Vec<TextExample>,
    pub skipped: Vec<LineIssue>,
    pub warnings: Vec<String>,
}

/// Reads one `{"source": ..., "summary": ...}` object per line. In strict
/// mode the first bad line aborts with a parse error; otherwise bad lines
/// are skipped and listed in `skipped`. Blank lines are ignored.
pub fn load_jsonl(path: &Path, strict: bool) -> Result<LoadedCorpus> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut loaded = LoadedCorpus::default();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<JsonlIn>(&line)
            .map_err(|e| e.to_string())
            .and_then(|rec| {
                let source = tokenize(&rec.source);
                let summary = tokenize(&rec.summary);
                if source.is_empty() || summary.is_empty() {
                    Err("source and summary must both contain tokens".to_string())
                } else {
                    Ok(TextExample {
                        id: rec.id.unwrap_or_else(|| format!("line-{lineno}")),
                        source,
                        summary,
                    })
                }
            });
        match parsed {
            Ok(ex) => loaded.examples.push(ex),
            Err(message) if strict => {
                return Err(Error::Parse {
                    path: path.into(),
                    line: lineno,
                    message,
                })
            }
            Err(message) => loaded.skipped.push(LineIssue { line: lineno, message }),
        }
    }
    if loaded.examples.is_empty() {
        loaded.warnings.push(format!("{}: corpus is empty", path.display()));
    }
    Ok(loaded)
}

/// Truncates summaries to `max_target` and sources to `max_source` tokens.
pub fn clip_lengths(examples: &mut [TextExample], max_source: usize, max_target: usize) {
    for ex in examples {
        ex.source.truncate(max_source);
        ex.summary.truncate(max_target);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub dev: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.8,
            dev: 0.1,
            test: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits<T> {
    pub train: Vec<T>,
    pub dev: Vec<T>,
    pub test: Vec<T>,
}

/// Seeded shuffle then partition. Sizes are `floor(n·train)` and
/// `floor(n·dev)`, with the remainder going to test.
pub fn split<T>(corpus: Vec<T>, fractions: SplitFractions, seed: u64) -> Result<Splits<T>> {
    let f = [fractions.train, fractions.dev, fractions.test];
    if f.iter().any(|x| !(0.0..=1.0).contains(x)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "split fractions must be in [0, 1] and sum to 1, got {f:?}"
        )));
    }
    let mut corpus = corpus;
    let n = corpus.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    corpus.shuffle(&mut rng);
    let n_train = ((n as f64 * fractions.train + 1e-9).floor() as usize).min(n);
    let n_dev = ((n as f64 * fractions.dev + 1e-9).floor() as usize).min(n - n_train);
    let mut rest = corpus.split_off(n_train);
    let test = rest.split_off(n_dev);
    Ok(Splits {
        train: corpus,
        dev: rest,
        test,
    })
}

/// Few-shot regime: exactly the first 1000 training examples.
pub fn few_shot<T>(mut train: Vec<T>) -> Result<Vec<T>> {
    if train.len() < FEW_SHOT_EXAMPLES {
        return Err(Error::invalid(format!(
            "few-shot mode needs {FEW_SHOT_EXAMPLES} training examples, have {}",
            train.len()
        )));
    }
    train.truncate(FEW_SHOT_EXAMPLES);
    Ok(train)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text_metrics::rouge_l_f1;

    fn spec(rule: SyntheticRule, noise: f64) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            vocab_size: 26,
            source_len_min: 6,
            source_len_max: 12,
            rule,
            noise_rate: noise,
            synonym_class_size: 2,
            max_target_tokens: 16,
            seed: 3,
        }
    }

    fn strings(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn lead_k_rule() {
        let s = spec(SyntheticRule::LeadK { k: 3 }, 0.0);
        assert_eq!(s.oracle_summary(&[9, 13, 6, 11]), vec![9, 13, 6]);
    }

    #[test]
    fn sorted_unique_rule() {
        let s = spec(SyntheticRule::SortedUnique, 0.0);
        assert_eq!(s.oracle_summary(&[8, 4, 8, 6]), vec![4, 6, 8]);
    }

    #[test]
    fn noise_free_oracle_scores_perfectly() {
        for rule in [
            SyntheticRule::LeadK { k: 3 },
            SyntheticRule::KeywordExtract { keyword_classes: 4 },
            SyntheticRule::SortedUnique,
        ] {
            let s = spec(rule, 0.0);
            let c = generate_synthetic(&s, 200).unwrap();
            for ex in &c.examples {
                assert!(!ex.summary.is_empty());
                assert_eq!(rouge_l_f1(&ex.summary, &s.oracle_summary(&ex.source)).f1, 1.0);
            }
        }
    }

    #[test]
    fn noise_swaps_within_synonym_class() {
        let s = spec(SyntheticRule::KeywordExtract { keyword_classes: 4 }, 0.3);
        let c = generate_synthetic(&s, 300).unwrap();
        let mut flipped = 0;
        for ex in &c.examples {
            let clean = s.oracle_summary(&ex.source);
            assert_eq!(clean.len(), ex.summary.len());
            for (a, b) in clean.iter().zip(ex.summary.iter()) {
                assert_eq!(s.class_of(*a), s.class_of(*b));
                if a != b {
                    flipped += 1;
                    assert!(!ex.source.contains(b), "paraphrase should not occur in source");
                }
            }
        }
        assert!(flipped > 0);
    }

    #[test]
    fn generation_is_deterministic() {
        let s = spec(SyntheticRule::KeywordExtract { keyword_classes: 4 }, 0.2);
        assert_eq!(generate_synthetic(&s, 50).unwrap(), generate_synthetic(&s, 50).unwrap());
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = spec(SyntheticRule::LeadK { k: 3 }, 0.0);
        s.noise_rate = 0.5;
        assert!(generate_synthetic(&s, 5).is_err());
        let s = spec(SyntheticRule::LeadK { k: 7 }, 0.0);
        assert!(generate_synthetic(&s, 5).is_err());
        let mut s = spec(SyntheticRule::SortedUnique, 0.0);
        s.source_len_min = 9;
        s.source_len_max = 4;
        assert!(generate_synthetic(&s, 5).is_err());
        assert!(generate_synthetic(&spec(SyntheticRule::SortedUnique, 0.0), 0).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let s = spec(SyntheticRule::KeywordExtract { keyword_classes: 4 }, 0.2);
        let c = generate_synthetic(&s, 40).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        write_jsonl(&path, &c.text_examples()).unwrap();
        let loaded = load_jsonl(&path, true).unwrap();
        let back: Vec<Example> = loaded.examples.iter().map(|e| c.vocab.encode_example(e)).collect();
        assert_eq!(back, c.examples);
    }

    #[test]
    fn jsonl_schema_handling() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        fs::write(&path, "{\"source\":\"a b\",\"summary\":\"a\"}\n{\"source\":\"x\"}\n").unwrap();
        let lenient = load_jsonl(&path, false).unwrap();
        assert_eq!(lenient.examples.len(), 1);
        assert_eq!(lenient.examples[0].source, strings("a b"));
        assert_eq!(lenient.examples[0].summary, strings("a"));
        assert_eq!(lenient.skipped[0].line, 2);
        match load_jsonl(&path, true) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }

        let empty = dir.path().join("empty.jsonl");
        fs::write(&empty, "").unwrap();
        let e = load_jsonl(&empty, true).unwrap();
        assert!(e.examples.is_empty());
        assert_eq!(e.warnings.len(), 1);

        assert!(matches!(load_jsonl(&dir.path().join("missing"), true), Err(Error::Io { .. })));
    }

    #[test]
    fn vocab_ordering_and_unk() {
        let texts = [strings("a a b"), strings("c b a")];
        let v = Vocab::build(texts.iter().map(|t| t.as_slice()), 10).unwrap();
        assert_eq!(&v.tokens()[4..], &["a", "b", "c"]);
        assert_eq!(v.id("zzz"), UNK_ID);

        let texts = [strings("d c b")];
        let v = Vocab::build(texts.iter().map(|t| t.as_slice()), 6).unwrap();
        assert_eq!(&v.tokens()[4..], &["b", "c"]);

        assert!(Vocab::build(texts.iter().map(|t| t.as_slice()), 4).is_err());
    }

    #[test]
    fn split_partition_laws() {
        let items: Vec<u32> = (0..97).collect();
        let s = split(items.clone(), SplitFractions::default(), 5).unwrap();
        let mut all: Vec<u32> = s.train.iter().chain(&s.dev).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, items);
        assert_eq!(s, split(items.clone(), SplitFractions::default(), 5).unwrap());

        let all_train = split(items.clone(), SplitFractions { train: 1.0, dev: 0.0, test: 0.0 }, 1).unwrap();
        assert_eq!(all_train.train.len(), 97);
        assert!(all_train.dev.is_empty() && all_train.test.is_empty());

        assert!(split(items, SplitFractions { train: 0.5, dev: 0.2, test: 0.2 }, 1).is_err());
    }

    #[test]
    fn few_shot_truncates_to_exactly_1000() {
        assert_eq!(few_shot((0..1500).collect::<Vec<_>>()).unwrap().len(), 1000);
        assert!(few_shot((0..999).collect::<Vec<_>>()).is_err());
    }
}

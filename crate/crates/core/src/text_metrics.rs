//! Tokenization, ROUGE-N / ROUGE-L scoring and n-gram novelty.
//!
//! The scorers are generic over the token type so the same code scores
//! word lists (`&[String]`, `&[&str]`) and vocabulary ids (`&[TokenId]`).
//! The ROUGE variant is deliberately plain: lowercase word tokens, no
//! stemming, no stopword removal, one reference, and ROUGE-L computed over
//! the whole flattened summary rather than sentence by sentence.

use std::collections::{HashMap, HashSet};
use std::hash::Hash;
use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

/// A sequence of vocabulary ids together with the size of the vocabulary it
/// indexes into.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSeq {
    tokens: Vec<TokenId>,
    vocab_size: usize,
}

impl TokenSeq {
    pub fn new(tokens: Vec<TokenId>, vocab_size: usize) -> Result<Self> {
        if vocab_size == 0 {
            return Err(Error::invalid("vocab_size must be positive"));
        }
        if let Some(bad) = tokens.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(Error::invalid(format!(
                "token id {bad} out of range for vocabulary of size {vocab_size}"
            )));
        }
        Ok(TokenSeq { tokens, vocab_size })
    }

    pub fn empty(vocab_size: usize) -> Result<Self> {
        Self::new(Vec::new(), vocab_size)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn into_tokens(self) -> Vec<TokenId> {
        self.tokens
    }
}

impl Deref for TokenSeq {
    type Target = [TokenId];

    fn deref(&self) -> &[TokenId] {
        &self.tokens
    }
}

/// Precision, recall and F1 of one overlap measurement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    pub const ZERO: RougeScore = RougeScore {
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
    };

    pub fn from_precision_recall(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        RougeScore {
            precision,
            recall,
            f1,
        }
    }
}

/// Lowercases, splits on whitespace and detaches every punctuation
/// character as a token of its own.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            if !current.is_empty() {
                out.push(std::mem::take(&mut current));
            }
        } else if is_punctuation(ch) {
            if !current.is_empty() {
                out.push(std::mem::take(&mut current));
            }
            out.push(ch.to_lowercase().collect());
        } else {
            current.extend(ch.to_lowercase());
        }
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}

fn is_punctuation(ch: char) -> bool {
    !ch.is_alphanumeric() && !ch.is_whitespace()
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram overlap between a reference and a hypothesis.
///
/// A side with fewer than `n` tokens contributes no n-grams and the
/// corresponding precision or recall is 0.
pub fn rouge_n_f1<T: Eq + Hash>(reference: &[T], hypothesis: &[T], n: usize) -> Result<RougeScore> {
    if n == 0 {
        return Err(Error::invalid("n-gram order must be at least 1"));
    }
    let ref_counts = ngram_counts(reference, n);
    let hyp_counts = ngram_counts(hypothesis, n);
    let overlap: usize = hyp_counts
        .iter()
        .map(|(gram, &c)| c.min(ref_counts.get(gram).copied().unwrap_or(0)))
        .sum();
    let gram_total = |len: usize| if len < n { 0 } else { len - n + 1 };
    let ref_total = gram_total(reference.len());
    let hyp_total = gram_total(hypothesis.len());
    let precision = if hyp_total == 0 {
        0.0
    } else {
        overlap as f64 / hyp_total as f64
    };
    let recall = if ref_total == 0 {
        0.0
    } else {
        overlap as f64 / ref_total as f64
    };
    Ok(RougeScore::from_precision_recall(precision, recall))
}

/// Length of the longest common subsequence, O(|a|·|b|) time and
/// O(min(|a|,|b|)) memory.
pub fn lcs_length<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    if short.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; short.len() + 1];
    let mut curr = vec![0usize; short.len() + 1];
    for x in long {
        for (j, y) in short.iter().enumerate() {
            curr[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(curr[j])
            };
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[short.len()]
}

/// Summary-level ROUGE-L: P = LCS/|hyp|, R = LCS/|ref|.
pub fn rouge_l_f1<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> RougeScore {
    if reference.is_empty() || hypothesis.is_empty() {
        return RougeScore::ZERO;
    }
    let lcs = lcs_length(reference, hypothesis) as f64;
    RougeScore::from_precision_recall(lcs / hypothesis.len() as f64, lcs / reference.len() as f64)
}

/// Fraction of the summary's unique n-grams that never occur in the source.
/// Summaries shorter than `n` have novelty 0.
pub fn ngram_novelty<T: Eq + Hash>(source: &[T], summary: &[T], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::invalid("n-gram order must be at least 1"));
    }
    if summary.len() < n {
        return Ok(0.0);
    }
    let source_grams: HashSet<&[T]> = if source.len() >= n {
        source.windows(n).collect()
    } else {
        HashSet::new()
    };
    let summary_grams: HashSet<&[T]> = summary.windows(n).collect();
    let novel = summary_grams
        .iter()
        .filter(|g| !source_grams.contains(*g))
        .count();
    Ok(novel as f64 / summary_grams.len() as f64)
}

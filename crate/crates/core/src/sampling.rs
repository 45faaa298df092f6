//! Candidate summaries drawn from teacher-forced decoder distributions:
//! per-slot argmax, per-slot second best, and Gumbel-Softmax samples.
//!
//! Every candidate has exactly one token per distribution row, so all
//! candidates for an example share the reference length.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text_metrics::{rouge_l_f1, TokenId, TokenSeq};

/// Probabilities below this are raised to it before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Temperature used for Gumbel-Softmax samples unless configured otherwise.
pub const DEFAULT_TEMPERATURE: f64 = 0.1;

const ROW_SUM_TOLERANCE: f64 = 1e-9;
const UNIFORM_CLAMP: f64 = 1e-12;

pub fn floored_ln(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

/// One probability vector over the vocabulary per decoding slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbMatrix {
    rows: Vec<Vec<f64>>,
}

impl ProbMatrix {
    /// Validates that every row is a distribution over the same vocabulary.
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        if let Some(first) = rows.first() {
            if first.is_empty() {
                return Err(Error::invalid("distribution rows must be non-empty"));
            }
            for (j, row) in rows.iter().enumerate() {
                if row.len() != first.len() {
                    return Err(Error::invalid(format!(
                        "row {j} has {} entries, expected {}",
                        row.len(),
                        first.len()
                    )));
                }
                if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                    return Err(Error::invalid(format!("row {j} has a negative or non-finite entry")));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                    return Err(Error::invalid(format!("row {j} sums to {sum}, not 1")));
                }
            }
        }
        Ok(ProbMatrix { rows })
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Vocabulary size V; 0 for an empty matrix.
    pub fn vocab_size(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    /// Floored log-probability of `tokens[j]` at slot `j`.
    pub fn token_logprobs(&self, tokens: &[TokenId]) -> Result<Vec<f64>> {
        if tokens.len() != self.rows.len() {
            return Err(Error::invalid(format!(
                "{} tokens for {} distribution rows",
                tokens.len(),
                self.rows.len()
            )));
        }
        tokens
            .iter()
            .zip(&self.rows)
            .map(|(&t, row)| {
                row.get(t as usize)
                    .map(|&p| floored_ln(p))
                    .ok_or_else(|| Error::invalid(format!("token {t} outside vocabulary")))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMethod {
    Argmax,
    SecondBest,
    Gumbel,
}

impl SampleMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            SampleMethod::Argmax => "argmax",
            SampleMethod::SecondBest => "second_best",
            SampleMethod::Gumbel => "gumbel",
        }
    }
}

/// A candidate summary with its per-token log-probabilities and reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub tokens: TokenSeq,
    pub method: SampleMethod,
    pub token_logprobs: Vec<f64>,
    pub reward: f64,
    pub soft_rows: Option<Vec<Vec<f64>>>,
}

impl Candidate {
    fn from_tokens(dist: &ProbMatrix, tokens: Vec<TokenId>, method: SampleMethod) -> Result<Self> {
        let token_logprobs = dist.token_logprobs(&tokens)?;
        Ok(Candidate {
            tokens: TokenSeq::new(tokens, dist.vocab_size())?,
            method,
            token_logprobs,
            reward: 0.0,
            soft_rows: None,
        })
    }

    /// Sets the reward to ROUGE-L F1 against `reference`.
    pub fn score_against(&mut self, reference: &[TokenId]) -> f64 {
        self.reward = rouge_l_f1(reference, &self.tokens).f1;
        self.reward
    }

    pub fn sequence_logprob(&self) -> f64 {
        self.token_logprobs.iter().sum()
    }
}

/// Index of the largest entry; the lowest index wins ties.
fn argmax_index(row: &[f64], skip: Option<usize>) -> usize {
    let mut best: Option<usize> = None;
    for (i, &p) in row.iter().enumerate() {
        if Some(i) == skip {
            continue;
        }
        match best {
            Some(b) if row[b] >= p => {}
            _ => best = Some(i),
        }
    }
    best.expect("row has at least one eligible entry")
}

pub fn argmax_decode(dist: &ProbMatrix) -> Result<Candidate> {
    if dist.is_empty() {
        return Err(Error::invalid("cannot decode an empty distribution matrix"));
    }
    let tokens = dist
        .rows
        .iter()
        .map(|row| argmax_index(row, None) as TokenId)
        .collect();
    Candidate::from_tokens(dist, tokens, SampleMethod::Argmax)
}

/// Per-slot second-best token: the argmax of the row once its argmax is removed.
pub fn second_best_decode(dist: &ProbMatrix) -> Result<Candidate> {
    if dist.is_empty() {
        return Err(Error::invalid("cannot decode an empty distribution matrix"));
    }
    if dist.vocab_size() < 2 {
        return Err(Error::invalid("second-best decoding needs a vocabulary of at least 2"));
    }
    let tokens = dist
        .rows
        .iter()
        .map(|row| {
            let first = argmax_index(row, None);
            argmax_index(row, Some(first)) as TokenId
        })
        .collect();
    Candidate::from_tokens(dist, tokens, SampleMethod::SecondBest)
}

/// Inverse-CDF transform of a uniform draw into a standard Gumbel sample.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP);
    -(-u.ln()).ln()
}

/// One draw from Gumbel(0, 1).
pub fn gumbel_noise<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    gumbel_from_uniform(rng.gen::<f64>())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GumbelConfig {
    pub temperature: f64,
    pub rng_seed: u64,
}

impl Default for GumbelConfig {
    fn default() -> Self {
        GumbelConfig {
            temperature: DEFAULT_TEMPERATURE,
            rng_seed: 0,
        }
    }
}

impl GumbelConfig {
    pub fn sampler(&self) -> Result<GumbelSampler> {
        GumbelSampler::new(self.temperature, self.rng_seed)
    }
}

/// A seeded Gumbel-Softmax sampler; owns its rng stream.
#[derive(Debug, Clone)]
pub struct GumbelSampler {
    temperature: f64,
    rng: ChaCha8Rng,
}

impl GumbelSampler {
    pub fn new(temperature: f64, seed: u64) -> Result<Self> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::invalid(format!("temperature must be positive, got {temperature}")));
        }
        Ok(GumbelSampler {
            temperature,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn sample(&mut self, dist: &ProbMatrix) -> Result<Candidate> {
        gumbel_softmax_sample(dist, self.temperature, &mut self.rng)
    }
}

/// Relaxed categorical sample per slot: softmax((ln p + g) / τ) with fresh
/// noise for every vocabulary entry. The hard token is the argmax of the
/// soft row; its log-probability is read from the original distribution.
pub fn gumbel_softmax_sample<R: Rng + ?Sized>(
    dist: &ProbMatrix,
    temperature: f64,
    rng: &mut R,
) -> Result<Candidate> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::invalid(format!("temperature must be positive, got {temperature}")));
    }
    if dist.is_empty() {
        return Err(Error::invalid("cannot sample from an empty distribution matrix"));
    }
    let mut soft_rows = Vec::with_capacity(dist.len());
    let mut tokens = Vec::with_capacity(dist.len());
    for row in &dist.rows {
        let scores: Vec<f64> = row
            .iter()
            .map(|&p| (floored_ln(p) + gumbel_noise(rng)) / temperature)
            .collect();
        let soft = crate::autodiff::softmax(&scores);
        tokens.push(argmax_index(&soft, None) as TokenId);
        soft_rows.push(soft);
    }
    let mut cand = Candidate::from_tokens(dist, tokens, SampleMethod::Gumbel)?;
    cand.soft_rows = Some(soft_rows);
    Ok(cand)
}

//! Training losses over decoder log-probabilities: token-level NLL, REINFORCE
//! with a self-critical baseline (optionally hinge-gated), expected risk over
//! a candidate set, and the convex mixture of NLL with either RL loss.
//!
//! Rewards enter every objective as constants; gradients flow only through
//! model log-probabilities. The RwB sum of log-probabilities is *not* length
//! normalized, while the RISK sequence score is (`exp(η/m)`).

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::DecoderOutput;
use crate::sampling::Candidate;
use crate::text_metrics::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Nll,
    Rwb,
    RwbHinge,
    Risk,
    Mixed,
}

/// A finite scalar loss, usually backed by a node of a [`Graph`].
#[derive(Debug, Clone, Copy)]
pub struct LossValue {
    value: f64,
    node: Option<Var>,
    kind: LossKind,
}

impl LossValue {
    pub fn from_node(graph: &Graph, node: Var, kind: LossKind) -> Result<Self> {
        let value = graph.scalar_value(node);
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("{kind:?} loss evaluated to {value}")));
        }
        Ok(LossValue {
            value,
            node: Some(node),
            kind,
        })
    }

    /// A loss value with no graph behind it; [`LossValue::backward`] rejects it.
    pub fn detached(value: f64, kind: LossKind) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("{kind:?} loss evaluated to {value}")));
        }
        Ok(LossValue {
            value,
            node: None,
            kind,
        })
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn kind(&self) -> LossKind {
        self.kind
    }

    pub fn node(&self) -> Option<Var> {
        self.node
    }

    pub fn backward(&self, graph: &mut Graph, params: &mut [Tensor]) -> Result<()> {
        let node = self
            .node
            .ok_or_else(|| Error::state("loss is detached from any computation graph"))?;
        graph.backward(node, params)
    }
}

/// Mean over slots of `-ln p(y*_j)`.
pub fn nll_loss(graph: &mut Graph, output: &DecoderOutput, reference: &[TokenId]) -> Result<LossValue> {
    if reference.is_empty() || reference.len() != output.len() {
        return Err(Error::invalid(format!(
            "reference has {} tokens for {} decoder rows",
            reference.len(),
            output.len()
        )));
    }
    let logprobs = output.token_logprobs(graph, reference)?;
    let joined = graph.concat(&logprobs);
    let total = graph.sum(joined);
    let loss = graph.scale(total, -1.0 / reference.len() as f64);
    LossValue::from_node(graph, loss, LossKind::Nll)
}

/// Advantage coefficient of the sampled sequence: `-(r_s - r_b)`, or with
/// the hinge `-max(0, r_s - r_b)`.
pub fn rwb_alpha(r_sample: f64, r_argmax: f64, hinge: bool) -> f64 {
    let advantage = r_sample - r_argmax;
    if hinge {
        if advantage > 0.0 {
            -advantage
        } else {
            0.0
        }
    } else {
        -advantage
    }
}

/// `α · Σ_t ln p(y^s_t)`. With α = 0 the loss is exactly zero and so is its
/// gradient.
pub fn rwb_loss(graph: &mut Graph, alpha: f64, sample_logprobs: &[Var], kind: LossKind) -> Result<LossValue> {
    if sample_logprobs.is_empty() {
        return Err(Error::invalid("sampled sequence has no tokens"));
    }
    if !alpha.is_finite() {
        return Err(Error::NonFinite(format!("alpha is {alpha}")));
    }
    let joined = graph.concat(sample_logprobs);
    let total = graph.sum(joined);
    let loss = graph.scale(total, alpha);
    LossValue::from_node(graph, loss, kind)
}

/// The candidate set U(x) with rewards and, once computed, the normalized
/// sequence probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub candidates: Vec<Candidate>,
    pub rewards: Vec<f64>,
    pub normalized_probs: Option<Vec<f64>>,
}

impl CandidateSet {
    /// Takes rewards from the candidates themselves.
    pub fn new(candidates: Vec<Candidate>) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::invalid("candidate set must hold at least one candidate"));
        }
        let rewards = candidates.iter().map(|c| c.reward).collect();
        Ok(CandidateSet {
            candidates,
            rewards,
            normalized_probs: None,
        })
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

/// Length-normalized sequence score `η/m` of each candidate.
fn mean_logprobs(set: &CandidateSet) -> Result<Vec<f64>> {
    set.candidates
        .iter()
        .map(|c| {
            if c.token_logprobs.is_empty() {
                return Err(Error::invalid("candidate has no tokens"));
            }
            Ok(c.token_logprobs.iter().sum::<f64>() / c.token_logprobs.len() as f64)
        })
        .collect()
}

/// Fills `normalized_probs` with `f_k / Σ f` where `f = exp(η/m)`.
pub fn risk_candidate_probs(set: &mut CandidateSet) -> Result<()> {
    let scores = mean_logprobs(set)?;
    // exp(η/m) directly; η/m ≥ ln(1e-12) keeps every f strictly positive.
    let f: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
    let z: f64 = f.iter().sum();
    set.normalized_probs = Some(f.into_iter().map(|x| x / z).collect());
    Ok(())
}

/// `-Σ_k r_k · p_k` with `p_k` rebuilt in the graph from `token_logprobs[k]`
/// (the differentiable counterparts of each candidate's log-probabilities).
pub fn risk_loss(graph: &mut Graph, set: &CandidateSet, token_logprobs: &[Vec<Var>]) -> Result<LossValue> {
    if set.normalized_probs.is_none() {
        return Err(Error::state("candidate probabilities not computed; call risk_candidate_probs first"));
    }
    if token_logprobs.len() != set.len() || set.rewards.len() != set.len() {
        return Err(Error::invalid(format!(
            "{} candidates, {} rewards, {} log-probability lists",
            set.len(),
            set.rewards.len(),
            token_logprobs.len()
        )));
    }
    let mut scores = Vec::with_capacity(set.len());
    for lps in token_logprobs {
        if lps.is_empty() {
            return Err(Error::invalid("candidate has no tokens"));
        }
        let joined = graph.concat(lps);
        let eta = graph.sum(joined);
        scores.push(graph.scale(eta, 1.0 / lps.len() as f64));
    }
    let scores = graph.concat(&scores);
    let probs = graph.softmax(scores);
    let neg_rewards = graph.input(set.rewards.iter().map(|r| -r).collect());
    let loss = graph.dot(probs, neg_rewards);
    LossValue::from_node(graph, loss, LossKind::Risk)
}

/// `γ·L_xent + (1-γ)·L_rl`.
pub fn mixed_loss(graph: &mut Graph, l_xent: &LossValue, l_rl: &LossValue, gamma: f64) -> Result<LossValue> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::invalid(format!("gamma must lie in [0, 1], got {gamma}")));
    }
    let (Some(x), Some(r)) = (l_xent.node, l_rl.node) else {
        return Err(Error::state("mixed loss needs graph-backed component losses"));
    };
    let a = graph.scale(x, gamma);
    let b = graph.scale(r, 1.0 - gamma);
    let loss = graph.add(a, b);
    LossValue::from_node(graph, loss, LossKind::Mixed)
}

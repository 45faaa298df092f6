//! A single-layer GRU encoder-decoder with one dot-product attention
//! context vector, small enough to train on a CPU in seconds.
//!
//! Parameter layout (V = vocab size, d = hidden size):
//!
//! | tensor | shape |
//! |---|---|
//! | embedding (shared by encoder and decoder) | V × d |
//! | per GRU: input weights W_z, W_r, W_n | d × d each |
//! | per GRU: recurrent weights U_z, U_r, U_n | d × d each |
//! | per GRU: biases b_z, b_r, b_n | d each |
//! | output projection over [state; context] | V × 2d |
//! | output bias | V |
//!
//! giving `3·V·d + 12·d² + 6·d + V` parameters in total
//! (see [`Seq2SeqModel::parameter_count_for`]).

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::sampling::{ProbMatrix, PROB_FLOOR};
use crate::text_metrics::TokenId;

pub const PAD_ID: TokenId = 0;
pub const BOS_ID: TokenId = 1;
pub const EOS_ID: TokenId = 2;
pub const UNK_ID: TokenId = 3;
pub const RESERVED_TOKENS: usize = 4;

pub const INIT_SCALE: f64 = 0.08;
pub const DEFAULT_LEARNING_RATE: f64 = 5e-4;
pub const DEFAULT_CLIP_NORM: f64 = 1.0;

const CHECKPOINT_FORMAT: &str = "rlsum-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

const EMBEDDING: usize = 0;
const ENCODER: usize = 1;
const DECODER: usize = 10;
const OUT_W: usize = 19;
const OUT_B: usize = 20;
const N_TENSORS: usize = 21;

// Offsets inside one GRU block.
const W_Z: usize = 0;
const W_R: usize = 1;
const W_N: usize = 2;
const U_Z: usize = 3;
const U_R: usize = 4;
const U_N: usize = 5;
const B_Z: usize = 6;
const B_R: usize = 7;
const B_N: usize = 8;

fn tensor_names() -> Vec<String> {
    let gru = ["w_z", "w_r", "w_n", "u_z", "u_r", "u_n", "b_z", "b_r", "b_n"];
    let mut names = vec!["embedding".to_string()];
    names.extend(gru.iter().map(|g| format!("encoder.{g}")));
    names.extend(gru.iter().map(|g| format!("decoder.{g}")));
    names.push("output.weight".into());
    names.push("output.bias".into());
    names
}

fn tensor_shapes(vocab_size: usize, hidden: usize) -> Vec<Vec<usize>> {
    let mut shapes = vec![vec![vocab_size, hidden]];
    for _ in 0..2 {
        shapes.extend((0..6).map(|_| vec![hidden, hidden]));
        shapes.extend((0..3).map(|_| vec![hidden]));
    }
    shapes.push(vec![vocab_size, 2 * hidden]);
    shapes.push(vec![vocab_size]);
    shapes
}

#[derive(Debug, Clone, PartialEq)]
pub struct Seq2SeqModel {
    vocab_size: usize,
    hidden: usize,
    params: Vec<Tensor>,
    warm_started: bool,
}

/// Decoder distributions for one example: graph handles to the softmax rows
/// plus their numeric values.
#[derive(Debug, Clone)]
pub struct DecoderOutput {
    rows: Vec<Var>,
    probs: ProbMatrix,
}

impl DecoderOutput {
    /// Wraps fixed distributions as graph constants.
    pub fn from_probs(graph: &mut Graph, probs: ProbMatrix) -> Self {
        let rows = probs.rows().iter().map(|r| graph.input(r.clone())).collect();
        DecoderOutput { rows, probs }
    }

    pub fn probs(&self) -> &ProbMatrix {
        &self.probs
    }

    pub fn rows(&self) -> &[Var] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Differentiable `ln p(tokens[j])` per slot, floored like the numeric path.
    pub fn token_logprobs(&self, graph: &mut Graph, tokens: &[TokenId]) -> Result<Vec<Var>> {
        if tokens.len() != self.rows.len() {
            return Err(Error::invalid(format!(
                "{} tokens for {} decoder rows",
                tokens.len(),
                self.rows.len()
            )));
        }
        let v = self.probs.vocab_size();
        tokens
            .iter()
            .zip(&self.rows)
            .map(|(&t, &row)| {
                if t as usize >= v {
                    return Err(Error::invalid(format!("token {t} outside vocabulary of {v}")));
                }
                let p = graph.pick(row, t as usize);
                Ok(graph.ln_floored(p, PROB_FLOOR))
            })
            .collect()
    }
}

struct Gru {
    w: [Var; 3],
    u: [Var; 3],
    b: [Var; 3],
}

impl Gru {
    fn step(&self, g: &mut Graph, x: Var, h: Var) -> Var {
        let gate = |g: &mut Graph, k: usize, rec_in: Var| {
            let a = g.matvec(self.w[k], x);
            let b = g.matvec(self.u[k], rec_in);
            let s = g.add(a, b);
            g.add(s, self.b[k])
        };
        let z = gate(g, 0, h);
        let z = g.sigmoid(z);
        let r = gate(g, 1, h);
        let r = g.sigmoid(r);
        let rh = g.mul(r, h);
        let n = gate(g, 2, rh);
        let n = g.tanh(n);
        // h' = (1 - z)·n + z·h = n + z·(h - n)
        let diff = g.sub(h, n);
        let zd = g.mul(z, diff);
        g.add(n, zd)
    }
}

impl Seq2SeqModel {
    /// Parameters drawn uniformly from [-0.08, 0.08] with a seeded rng.
    pub fn init(vocab_size: usize, hidden: usize, seed: u64) -> Result<Self> {
        if vocab_size < RESERVED_TOKENS {
            return Err(Error::invalid(format!(
                "vocab_size must be at least {RESERVED_TOKENS} (pad, bos, eos, unk), got {vocab_size}"
            )));
        }
        if hidden == 0 {
            return Err(Error::invalid("hidden size must be at least 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = tensor_shapes(vocab_size, hidden)
            .into_iter()
            .map(|shape| {
                let n = shape.iter().product();
                let values = (0..n).map(|_| rng.gen_range(-INIT_SCALE..=INIT_SCALE)).collect();
                Tensor::new(shape, values, true)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Seq2SeqModel {
            vocab_size,
            hidden,
            params,
            warm_started: false,
        })
    }

    pub fn parameter_count_for(vocab_size: usize, hidden: usize) -> usize {
        3 * vocab_size * hidden + 12 * hidden * hidden + 6 * hidden + vocab_size
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// Whether the model has been through NLL training.
    pub fn is_warm_started(&self) -> bool {
        self.warm_started
    }

    pub fn mark_warm_started(&mut self) {
        self.warm_started = true;
    }

    fn check_tokens(&self, what: &str, tokens: &[TokenId]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::invalid(format!("{what} must be non-empty")));
        }
        if let Some(t) = tokens.iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(Error::invalid(format!(
                "{what} token {t} outside vocabulary of {}",
                self.vocab_size
            )));
        }
        Ok(())
    }

    /// Teacher-forced forward pass on the model's own parameters.
    pub fn forward_teacher_forced(
        &self,
        graph: &mut Graph,
        source: &[TokenId],
        target: &[TokenId],
    ) -> Result<DecoderOutput> {
        self.check_tokens("source", source)?;
        self.check_tokens("target", target)?;
        forward_with(&self.params, self.hidden, graph, source, target)
    }

    /// Same forward pass with an external parameter set of identical layout,
    /// used for finite-difference checks.
    pub fn forward_with_params(
        &self,
        params: &[Tensor],
        graph: &mut Graph,
        source: &[TokenId],
        target: &[TokenId],
    ) -> Result<DecoderOutput> {
        if params.len() != N_TENSORS
            || params.iter().zip(&self.params).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::invalid("parameter set does not match the model layout"));
        }
        self.check_tokens("source", source)?;
        self.check_tokens("target", target)?;
        forward_with(params, self.hidden, graph, source, target)
    }

    /// Global-norm clipping followed by a plain gradient step; clears
    /// gradients. Returns the pre-clip gradient norm.
    pub fn sgd_step(&mut self, learning_rate: f64, clip_norm: f64) -> Result<f64> {
        if !(learning_rate >= 0.0) || !learning_rate.is_finite() {
            return Err(Error::invalid(format!("learning rate must be non-negative, got {learning_rate}")));
        }
        if !(clip_norm > 0.0) {
            return Err(Error::invalid(format!("clip norm must be positive, got {clip_norm}")));
        }
        let mut sq = 0.0;
        for (i, t) in self.params.iter().enumerate() {
            if !t.requires_grad() {
                continue;
            }
            let g = t
                .grad()
                .ok_or_else(|| Error::state(format!("no gradient on parameter {i}; run backward first")))?;
            sq += g.iter().map(|x| x * x).sum::<f64>();
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient norm is {norm}")));
        }
        let scale = if norm > clip_norm { clip_norm / norm } else { 1.0 };
        for t in self.params.iter_mut().filter(|t| t.requires_grad()) {
            let g = t.grad().expect("checked above").to_vec();
            for (v, gi) in t.values_mut().iter_mut().zip(g) {
                *v -= learning_rate * scale * gi;
            }
            t.zero_grad();
        }
        Ok(norm)
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn global_grad_norm(&self) -> Option<f64> {
        let mut sq = 0.0;
        for t in &self.params {
            sq += t.grad()?.iter().map(|x| x * x).sum::<f64>();
        }
        Some(sq.sqrt())
    }

    pub fn save(&self, path: &Path, vocab: Option<&[String]>, config: serde_json::Value) -> Result<()> {
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            vocab_size: self.vocab_size,
            hidden: self.hidden,
            warm_started: self.warm_started,
            vocab: vocab.map(<[String]>::to_vec),
            config,
            tensors: tensor_names()
                .into_iter()
                .zip(&self.params)
                .map(|(name, t)| NamedTensor {
                    name,
                    shape: t.shape().to_vec(),
                    values: t.values().to_vec(),
                })
                .collect(),
        };
        let text = serde_json::to_string(&file)
            .map_err(|e| Error::state(format!("serializing checkpoint: {e}")))?;
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: CheckpointFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.into(),
            line: e.line(),
            message: e.to_string(),
        })?;
        let bad = |msg: String| Error::Parse {
            path: path.into(),
            line: 0,
            message: msg,
        };
        if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
            return Err(bad(format!(
                "unsupported checkpoint {} v{}",
                file.format, file.version
            )));
        }
        let shapes = tensor_shapes(file.vocab_size, file.hidden);
        if file.tensors.len() != shapes.len() {
            return Err(bad(format!(
                "expected {} tensors, found {}",
                shapes.len(),
                file.tensors.len()
            )));
        }
        let names = tensor_names();
        let mut params = Vec::with_capacity(shapes.len());
        for ((t, shape), name) in file.tensors.into_iter().zip(shapes).zip(names) {
            if t.name != name || t.shape != shape {
                return Err(bad(format!(
                    "tensor `{}` has shape {:?}; expected `{name}` with shape {shape:?}",
                    t.name, t.shape
                )));
            }
            params.push(Tensor::new(t.shape, t.values, true).map_err(|e| bad(e.to_string()))?);
        }
        if let Some(v) = &file.vocab {
            if v.len() != file.vocab_size {
                return Err(bad(format!(
                    "vocabulary lists {} tokens but vocab_size is {}",
                    v.len(),
                    file.vocab_size
                )));
            }
        }
        Ok(Checkpoint {
            model: Seq2SeqModel {
                vocab_size: file.vocab_size,
                hidden: file.hidden,
                params,
                warm_started: file.warm_started,
            },
            vocab: file.vocab,
            config: file.config,
        })
    }
}

/// A loaded checkpoint: model, optional vocabulary and the config it was trained with.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Seq2SeqModel,
    pub vocab: Option<Vec<String>>,
    pub config: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    vocab_size: usize,
    hidden: usize,
    warm_started: bool,
    vocab: Option<Vec<String>>,
    config: serde_json::Value,
    tensors: Vec<NamedTensor>,
}

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

fn forward_with(
    params: &[Tensor],
    hidden: usize,
    g: &mut Graph,
    source: &[TokenId],
    target: &[TokenId],
) -> Result<DecoderOutput> {
    let p: Vec<Var> = params.iter().enumerate().map(|(i, t)| g.param(i, t)).collect();
    let gru = |base: usize| Gru {
        w: [p[base + W_Z], p[base + W_R], p[base + W_N]],
        u: [p[base + U_Z], p[base + U_R], p[base + U_N]],
        b: [p[base + B_Z], p[base + B_R], p[base + B_N]],
    };
    let (encoder, decoder) = (gru(ENCODER), gru(DECODER));

    let mut h = g.input(vec![0.0; hidden]);
    let mut states = Vec::with_capacity(source.len());
    for &tok in source {
        let x = g.row(p[EMBEDDING], tok as usize);
        h = encoder.step(g, x, h);
        states.push(h);
    }
    let memory = g.stack(&states);

    let mut rows = Vec::with_capacity(target.len());
    let mut values = Vec::with_capacity(target.len());
    let mut s = h;
    let mut prev = BOS_ID;
    for &tok in target {
        let x = g.row(p[EMBEDDING], prev as usize);
        s = decoder.step(g, x, s);
        let scores = g.matvec(memory, s);
        let attn = g.softmax(scores);
        let context = g.mat_t_vec(memory, attn);
        let features = g.concat(&[s, context]);
        let logits = g.matvec(p[OUT_W], features);
        let logits = g.add(logits, p[OUT_B]);
        let probs = g.softmax(logits);
        if g.value(probs).iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("output distribution at step {}", values.len())));
        }
        values.push(g.value(probs).to_vec());
        rows.push(probs);
        prev = tok;
    }
    Ok(DecoderOutput {
        rows,
        probs: ProbMatrix::new(values)?,
    })
}

//! Sequence-level RL fine-tuning for summarization: ROUGE rewards, the
//! RwB-Hinge and RISK objectives, candidate samplers, a small autodiff
//! seq2seq model, synthetic data, a two-phase training protocol, and
//! bootstrap/novelty analysis.

mod error;

pub mod analysis;
pub mod autodiff;
pub mod data;
pub mod model;
pub mod objectives;
pub mod sampling;
pub mod text_metrics;
pub mod training;

pub use error::{Error, Result};

pub use analysis::{bootstrap_test, BootstrapResult, NoveltyReport, PairedScores};
pub use autodiff::{Graph, Tensor, Var};
pub use data::{Example, SyntheticTaskSpec, TextExample, Vocab};
pub use model::{DecoderOutput, Seq2SeqModel};
pub use objectives::{CandidateSet, LossKind, LossValue};
pub use sampling::{Candidate, GumbelSampler, ProbMatrix, SampleMethod};
pub use text_metrics::{RougeScore, TokenId, TokenSeq};
pub use training::{Objective, RunResult, TrainConfig, ValidationMetrics};

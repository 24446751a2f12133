//! Hybrid long-tail recommendation: pooled semantic item embeddings, an
//! attention-based user intent encoder with learnable time decay, three score
//! channels (semantic, collaborative, generative) fused linearly, beam-search
//! candidate generation with ranking-loss alignment, and an offline metric suite.
//!
//! Numeric kernels are generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the scalar used by the pipeline and the command-line driver.

pub mod alignment;
pub mod cf;
pub mod commands;
pub mod config;
pub mod data;
pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod generative;
pub mod intent;
pub mod jsonl;
pub mod pipeline;
pub mod rank;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Scalar type used by the end-to-end pipeline.
pub type Real = f64;

pub type Embeddings = embedding::EmbeddingMatrix<Real>;
pub type Attention = intent::AttentionParams<Real>;
pub type Markov = generative::MarkovModel<Real>;
pub type Scorer = fusion::Recommender<Real>;
pub type Ranking = alignment::CandidateRanking<Real>;

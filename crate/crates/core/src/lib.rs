//! Retrieval invariance under query rewriting and corpus re-chunking.
//!
//! A low-rank adapter maps coarse retriever embeddings toward the
//! relevance structure of an LLM-space embedding, trained with a KL
//! alignment loss plus a variance penalty over intervention cells.

pub mod adapter;
pub mod cli;
pub mod alignment;
pub mod config;
pub mod corpus;
pub mod embedding;
pub mod invariance;
pub mod lm_oracle;
pub mod metrics;
pub mod pipeline;
pub mod error;
pub mod fixture;
pub mod generation;
pub mod provider;
pub mod reduce;
pub mod remote;
pub mod rng;
pub mod scalar;
pub mod scoring;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Embedding = embedding::Embedding<f64>;
pub type Embedding32 = embedding::Embedding<f32>;
pub type EmbeddingMatrix = embedding::EmbeddingMatrix<f64>;
pub type EmbeddingMatrix32 = embedding::EmbeddingMatrix<f32>;
pub type AdapterParams = adapter::AdapterParams<f64>;
pub type AdapterParams32 = adapter::AdapterParams<f32>;
pub type AdapterGrad = adapter::AdapterGrad<f64>;
pub type RelevanceDistribution = scoring::RelevanceDistribution<f64>;

//! Toolkit for multi-modal question generation: image-to-text signals, prompt
//! templating, contrastive-search decoding with perplexity reranking, few-shot
//! exemplar retrieval and n-gram evaluation metrics.
//!
//! Numeric kernels are generic over [`num::Real`] (`f32` or `f64`); the aliases
//! below fix the scalar type used by the pipeline's serialized artifacts.

pub mod corpus;
pub mod decode;
pub mod exemplar_retrieval;
pub mod http;
pub mod image_signals;
pub mod metrics;
pub mod num;
pub mod promptkit;
pub mod rng;
pub mod trainjob;

pub use num::Real;

pub type EmbeddingVector = exemplar_retrieval::Embedding<f64>;
pub type EmbeddingVectorF32 = exemplar_retrieval::Embedding<f32>;
pub type ExemplarIndex = exemplar_retrieval::Index<f64>;
pub type ExemplarIndexF32 = exemplar_retrieval::Index<f32>;
pub type ExampleScores = metrics::Scores<f64>;
pub type MetricReport = metrics::Report<f64>;
pub type RunAverage = metrics::Averaged<f64>;

//! Demonstration-based few-shot sequence labeling.
//!
//! The crate is organised around the pipeline it implements:
//!
//! - [`corpus`]: instances, BIO tags, markups, CoNLL ingestion and few-shot sampling.
//! - [`encoding`]: semantic text encoders, cosine similarity and the embedding cache.
//! - [`featsim`]: the trainable feature-similarity predictor and the dual similarity score.
//! - [`demo`]: the demonstration incorporator (per-feature pools, ranking, filtering,
//!   sampling and template rendering).
//! - [`adversarial`]: example and label permutations and the combined training loss.
//! - [`tagger`]: the tagging model contract, the reference linear tagger, transition
//!   estimation and Viterbi decoding.
//! - [`inference`]: k-ensemble tagging with per-token voting.
//! - [`eval`]: entity-level F1, similarity-predictor metrics and synthetic corpora.

pub mod adversarial;
pub mod corpus;
pub mod demo;
pub mod encoding;
pub mod eval;
pub mod featsim;
pub mod inference;
pub mod seeding;
pub mod tagger;

mod hashing;

pub use corpus::{Corpus, FeatureLabel, FewShotSplit, Instance, Markup, Tag};
pub use demo::{DemoPool, DemoScorer, DemonstratedInput, Demonstration};
pub use encoding::{EmbeddingVector, HashedNgramEncoder, SemanticEncoder};
pub use featsim::{DualScorer, DualSimilarityConfig, FeatureSimilarityModel};
pub use tagger::{ReferenceTagger, TaggerModel, TransitionMatrix};

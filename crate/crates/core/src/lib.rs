//! Features defined by natural-language yes/no queries, scored by a language
//! model, and small linear classifiers trained over them.
//!
//! The pipeline: [`data`] loads documents and feature queries, [`extract`]
//! chunks each document and turns scorer log-probabilities into calibrated
//! feature values via [`scorer`], [`linear`] fits logistic models over the
//! resulting [`extract::FeatureMatrix`], and [`eval`] / [`experiments`]
//! produce the evaluation reports. [`baselines`] holds the TF-IDF and direct
//! zero-shot comparison systems; [`synth`] generates a synthetic corpus with a
//! known ground truth.

pub mod baselines;
pub mod data;
pub mod eval;
pub mod experiments;
pub mod extract;
pub mod hash;
pub mod linear;
pub mod prompt;
pub mod scorer;
pub mod synth;

pub use data::{load_dataset, load_queries, Dataset, Document, FeatureQuery, QuerySet, Split};
pub use extract::{extract_matrix, ChunkingConfig, FeatureMatrix};
pub use scorer::{Scorer, ScoreRequest, ScoreResponse};

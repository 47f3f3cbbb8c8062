//! From documents and queries to a feature matrix.
//!
//! Each document is split into at most `max_chunks` chunks, every chunk is
//! scored against every query, the yes-mass is normalized against the no-mass,
//! and the per-feature maximum over chunks becomes the feature value.

mod matrix;
mod run;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::FeatureQuery;
use crate::prompt::{self, PromptTemplate};
use crate::scorer::{ScoreResponse, ScorerError};

pub use matrix::{FeatureMatrix, Provenance};
pub use run::{content_hash, extract_matrix, ExtractOptions, Extractor};

#[derive(Debug, Error)]
pub enum ExtractError {
    #[error("dataset has no documents")]
    EmptyDataset,
    #[error("query set has no queries")]
    EmptyQuerySet,
    #[error("document {0:?} has no text to score (whitespace only)")]
    BlankDocument(String),
    #[error("question for query {0:?} is empty")]
    EmptyQuestion(String),
    #[error("unknown template {0:?}")]
    UnknownTemplate(String),
    #[error("scoring document {doc_id:?} with query {query_id:?} failed: {source}")]
    Scorer {
        doc_id: String,
        query_id: String,
        #[source]
        source: ScorerError,
    },
    #[error("feature value {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("feature cache {path}: {message}")]
    Cache { path: String, message: String },
    #[error("feature matrix: {0}")]
    Matrix(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenUnit {
    /// Chunk budgets are counted in backend tokens, calibrated per document
    /// from the scorer's reported prompt length; falls back to words when the
    /// backend does not report token counts.
    BackendTokens,
    WhitespaceWords,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChunkingConfig {
    pub max_tokens_per_chunk: usize,
    pub max_chunks: usize,
    pub token_unit: TokenUnit,
}

impl Default for ChunkingConfig {
    fn default() -> Self {
        ChunkingConfig {
            max_tokens_per_chunk: 512,
            max_chunks: 4,
            token_unit: TokenUnit::WhitespaceWords,
        }
    }
}

impl ChunkingConfig {
    pub fn validate(&self) -> Result<(), ExtractError> {
        if self.max_tokens_per_chunk == 0 || self.max_chunks == 0 {
            return Err(ExtractError::Matrix(
                "chunk size and chunk count must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chunk {
    pub text: String,
    pub tokens: usize,
}

/// Greedy left-to-right packing of whitespace-delimited words into chunks of
/// at most `max_units` words; only the first `max_chunks` are kept.
pub fn chunk_words(text: &str, max_units: usize, max_chunks: usize) -> Vec<Chunk> {
    let words: Vec<&str> = text.split_whitespace().collect();
    words
        .chunks(max_units.max(1))
        .take(max_chunks)
        .map(|w| Chunk {
            text: w.join(" "),
            tokens: w.len(),
        })
        .collect()
}

/// Chunks `text` by whitespace words using the config's budget. Backend-token
/// budgets are converted to words by [`Extractor`] before reaching here.
pub fn chunk_document(text: &str, cfg: &ChunkingConfig) -> Vec<Chunk> {
    chunk_words(text, cfg.max_tokens_per_chunk, cfg.max_chunks)
}

pub fn render_prompt(
    template: &PromptTemplate,
    chunk: &Chunk,
    query: &FeatureQuery,
) -> Result<String, ExtractError> {
    if query.question.trim().is_empty() {
        return Err(ExtractError::EmptyQuestion(query.query_id.clone()));
    }
    Ok(template.render(&chunk.text, &query.question))
}

pub fn template_for(query: &FeatureQuery) -> Result<&'static PromptTemplate, ExtractError> {
    prompt::builtin(&query.template_id)
        .ok_or_else(|| ExtractError::UnknownTemplate(query.template_id.clone()))
}

/// Yes-mass normalized against the no-mass, `1 / (1 + exp(ln - ly))`.
pub fn yes_probability(response: &ScoreResponse) -> f64 {
    1.0 / (1.0 + (response.logprob_no - response.logprob_yes).exp())
}

/// Normalized yes-probability per chunk, max-pooled over chunks.
///
/// Panics if `responses` is empty.
pub fn continuous_feature(responses: &[ScoreResponse]) -> f64 {
    assert!(!responses.is_empty(), "continuous_feature needs at least one chunk response");
    responses
        .iter()
        .map(yes_probability)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// 1 iff `value > 0.5`; an exact tie maps to 0.
pub fn binarize(value: f64) -> Result<bool, ExtractError> {
    if !(0.0..=1.0).contains(&value) {
        return Err(ExtractError::OutOfRange(value));
    }
    Ok(value > 0.5)
}

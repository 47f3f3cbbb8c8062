//! The scorer contract: yes/no continuation log-probabilities for a prompt.
//!
//! Backends never threshold or normalize; calibration lives in
//! [`crate::extract`]. Two backends ship: [`MockScorer`], a keyword-count
//! oracle, and [`HttpScorer`], a client for a remote scoring endpoint.

mod http;
pub(crate) mod mock;

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::{HttpScorer, HttpScorerConfig, DEFAULT_MAX_INFLIGHT};
pub use mock::{mock_score, LexiconEntry, MockLexicon, MockNoise, MockScorer};

/// The only candidate pair the pipeline ever sends, lowercase.
pub const CANDIDATES: [&str; 2] = ["yes", "no"];

#[derive(Debug, Error)]
pub enum ScorerError {
    #[error("invalid score request: {0}")]
    InvalidRequest(String),
    #[error("query {0:?} is not in the mock lexicon")]
    UnknownQuery(String),
    #[error("invalid mock lexicon: {0}")]
    Lexicon(String),
    #[error("scorer unavailable after {attempts} attempts: {message}")]
    Unavailable { attempts: u32, message: String },
    #[error("scorer returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("scorer response does not match schema ({message}); raw body: {body}")]
    Schema { message: String, body: String },
    #[error("bad scorer configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub prompt: String,
    pub candidates: Vec<String>,
    /// Routing hint naming the feature query that produced the prompt. It
    /// never goes on the wire; the mock uses it to pick its lexicon entry.
    #[serde(skip)]
    pub query_id: Option<String>,
}

impl ScoreRequest {
    pub fn new(prompt: impl Into<String>) -> Self {
        ScoreRequest {
            prompt: prompt.into(),
            candidates: CANDIDATES.iter().map(|c| c.to_string()).collect(),
            query_id: None,
        }
    }

    pub fn for_query(prompt: impl Into<String>, query_id: impl Into<String>) -> Self {
        ScoreRequest {
            query_id: Some(query_id.into()),
            ..Self::new(prompt)
        }
    }

    pub fn validate(&self) -> Result<(), ScorerError> {
        if self.prompt.is_empty() {
            return Err(ScorerError::InvalidRequest("prompt must be non-empty".into()));
        }
        if self.candidates.len() != 2
            || self.candidates[0] != CANDIDATES[0]
            || self.candidates[1] != CANDIDATES[1]
        {
            return Err(ScorerError::InvalidRequest(format!(
                "candidates must be exactly [\"yes\", \"no\"], got {:?}",
                self.candidates
            )));
        }
        Ok(())
    }
}

/// Natural-log masses of the two candidate continuations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub logprob_yes: f64,
    pub logprob_no: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_token_count: Option<u64>,
}

pub trait Scorer: Send + Sync {
    /// Stable identity string; part of every feature-matrix provenance.
    fn identity(&self) -> String;

    fn score(&self, request: &ScoreRequest) -> Result<ScoreResponse, ScorerError>;
}

impl<S: Scorer + ?Sized> Scorer for Arc<S> {
    fn identity(&self) -> String {
        (**self).identity()
    }

    fn score(&self, request: &ScoreRequest) -> Result<ScoreResponse, ScorerError> {
        (**self).score(request)
    }
}

/// Opens a scorer from `mock:<lexicon.json>` or `http:<url>`. A bare
/// `http://...` URL also works, and `http:` alone takes `SCORER_ENDPOINT`.
pub fn open_scorer(spec: &str) -> Result<Arc<dyn Scorer>, ScorerError> {
    if let Some(path) = spec.strip_prefix("mock:") {
        let lexicon = MockLexicon::load(Path::new(path))?;
        Ok(Arc::new(MockScorer::new(lexicon)))
    } else if let Some(url) = spec.strip_prefix("http:") {
        let url = if url.starts_with("//") { spec } else { url };
        let mut config = HttpScorerConfig::from_env()?;
        if !url.is_empty() {
            config.endpoint = url.to_string();
        }
        Ok(Arc::new(HttpScorer::new(config)?))
    } else {
        Err(ScorerError::Config(format!(
            "scorer must be mock:<lexicon.json> or http:<url>, got {spec:?}"
        )))
    }
}

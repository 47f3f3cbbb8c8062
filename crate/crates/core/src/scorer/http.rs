use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::Deserialize;

use super::{ScoreRequest, ScoreResponse, Scorer, ScorerError};

pub const DEFAULT_MAX_INFLIGHT: usize = 8;
const SCORE_PATH: &str = "/v1/score";

#[derive(Debug, Clone)]
pub struct HttpScorerConfig {
    /// Base URL; `/v1/score` is appended unless already present.
    pub endpoint: String,
    pub token: Option<String>,
    pub max_inflight: usize,
    pub attempts: u32,
    pub initial_backoff: Duration,
    pub timeout: Duration,
}

impl HttpScorerConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        HttpScorerConfig {
            endpoint: endpoint.into(),
            token: None,
            max_inflight: DEFAULT_MAX_INFLIGHT,
            attempts: 3,
            initial_backoff: Duration::from_millis(200),
            timeout: Duration::from_secs(60),
        }
    }

    /// Reads `SCORER_ENDPOINT`, `SCORER_TOKEN`, and `SCORER_MAX_INFLIGHT`.
    pub fn from_env() -> Result<Self, ScorerError> {
        let mut config = Self::new(std::env::var("SCORER_ENDPOINT").unwrap_or_default());
        config.token = std::env::var("SCORER_TOKEN").ok().filter(|t| !t.is_empty());
        if let Ok(raw) = std::env::var("SCORER_MAX_INFLIGHT") {
            config.max_inflight = raw
                .parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| {
                    ScorerError::Config(format!("SCORER_MAX_INFLIGHT must be a positive integer, got {raw:?}"))
                })?;
        }
        Ok(config)
    }

    fn url(&self) -> String {
        let base = self.endpoint.trim_end_matches('/');
        if base.ends_with(SCORE_PATH) {
            base.to_string()
        } else {
            format!("{base}{SCORE_PATH}")
        }
    }
}

/// Counting semaphore bounding concurrent requests.
struct InflightLimit {
    free: Mutex<usize>,
    available: Condvar,
}

struct Permit<'a>(&'a InflightLimit);

impl InflightLimit {
    fn new(n: usize) -> Self {
        InflightLimit {
            free: Mutex::new(n),
            available: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().expect("inflight lock");
        while *free == 0 {
            free = self.available.wait(free).expect("inflight lock");
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("inflight lock") += 1;
        self.0.available.notify_one();
    }
}

#[derive(Deserialize)]
struct WireLogprobs {
    yes: f64,
    no: f64,
}

#[derive(Deserialize)]
struct WireResponse {
    logprobs: WireLogprobs,
    #[serde(default)]
    prompt_token_count: Option<u64>,
}

pub(crate) fn parse_wire_response(body: &str) -> Result<ScoreResponse, ScorerError> {
    let wire: WireResponse = serde_json::from_str(body).map_err(|e| ScorerError::Schema {
        message: e.to_string(),
        body: body.to_string(),
    })?;
    let WireLogprobs { yes, no } = wire.logprobs;
    if !yes.is_finite() || !no.is_finite() {
        return Err(ScorerError::Schema {
            message: "log-probabilities must be finite".into(),
            body: body.to_string(),
        });
    }
    Ok(ScoreResponse {
        logprob_yes: yes,
        logprob_no: no,
        prompt_token_count: wire.prompt_token_count,
    })
}

enum Attempt {
    Done(ScoreResponse),
    Transient(String),
}

/// Client for a remote scorer speaking `POST /v1/score`.
pub struct HttpScorer {
    config: HttpScorerConfig,
    url: String,
    agent: ureq::Agent,
    limit: InflightLimit,
}

impl HttpScorer {
    pub fn new(config: HttpScorerConfig) -> Result<Self, ScorerError> {
        if config.endpoint.is_empty() {
            return Err(ScorerError::Config(
                "no scorer endpoint (set SCORER_ENDPOINT or pass http:<url>)".into(),
            ));
        }
        if config.max_inflight == 0 || config.attempts == 0 {
            return Err(ScorerError::Config("max_inflight and attempts must be positive".into()));
        }
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(config.timeout))
            .build()
            .new_agent();
        Ok(HttpScorer {
            url: config.url(),
            limit: InflightLimit::new(config.max_inflight),
            agent,
            config,
        })
    }

    fn attempt(&self, request: &ScoreRequest) -> Result<Attempt, ScorerError> {
        let mut call = self.agent.post(&self.url);
        if let Some(token) = &self.config.token {
            call = call.header("Authorization", &format!("Bearer {token}"));
        }
        let mut response = match call.send_json(request) {
            Ok(r) => r,
            Err(e) => return Ok(Attempt::Transient(e.to_string())),
        };
        let status = response.status().as_u16();
        let body = match response.body_mut().read_to_string() {
            Ok(b) => b,
            Err(e) => return Ok(Attempt::Transient(format!("reading body: {e}"))),
        };
        match status {
            200..=299 => parse_wire_response(&body).map(Attempt::Done),
            408 | 429 | 500..=599 => Ok(Attempt::Transient(format!("HTTP {status}: {body}"))),
            _ => Err(ScorerError::Status { status, body }),
        }
    }
}

impl Scorer for HttpScorer {
    fn identity(&self) -> String {
        format!("http:{}", self.url)
    }

    fn score(&self, request: &ScoreRequest) -> Result<ScoreResponse, ScorerError> {
        request.validate()?;
        let _permit = self.limit.acquire();
        let mut backoff = self.config.initial_backoff;
        let mut last = String::new();
        for attempt in 1..=self.config.attempts {
            match self.attempt(request)? {
                Attempt::Done(response) => return Ok(response),
                Attempt::Transient(message) => {
                    log::warn!("scorer attempt {attempt} failed: {message}");
                    last = message;
                }
            }
            if attempt < self.config.attempts {
                std::thread::sleep(backoff);
                backoff *= 2;
            }
        }
        Err(ScorerError::Unavailable {
            attempts: self.config.attempts,
            message: last,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maps_wire_fields() {
        let r = parse_wire_response(r#"{"logprobs":{"yes":-0.2,"no":-1.8}}"#).unwrap();
        assert_eq!((r.logprob_yes, r.logprob_no), (-0.2, -1.8));
        assert_eq!(r.prompt_token_count, None);
        let r = parse_wire_response(r#"{"logprobs":{"yes":-1,"no":-2},"prompt_token_count":17}"#)
            .unwrap();
        assert_eq!(r.prompt_token_count, Some(17));
    }

    #[test]
    fn missing_candidate_is_schema_error_with_body() {
        let body = r#"{"logprobs":{"yes":-0.2}}"#;
        match parse_wire_response(body).unwrap_err() {
            ScorerError::Schema { body: raw, .. } => assert_eq!(raw, body),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn url_normalization() {
        assert_eq!(HttpScorerConfig::new("http://h:1/").url(), "http://h:1/v1/score");
        assert_eq!(HttpScorerConfig::new("http://h:1/v1/score").url(), "http://h:1/v1/score");
    }

    #[test]
    fn empty_endpoint_rejected() {
        assert!(matches!(
            HttpScorer::new(HttpScorerConfig::new("")),
            Err(ScorerError::Config(_))
        ));
    }
}

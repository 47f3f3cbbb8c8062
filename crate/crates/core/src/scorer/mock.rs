use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ScoreRequest, ScoreResponse, Scorer, ScorerError};
use crate::prompt;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LexiconEntry {
    pub keywords: Vec<String>,
    pub alpha: f64,
    pub beta: f64,
}

/// Gaussian noise added to `logprob_yes`, drawn from a generator seeded by
/// `(seed, prompt)` so that every prompt always gets the same perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MockNoise {
    pub sd: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockLexicon {
    pub queries: BTreeMap<String, LexiconEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<MockNoise>,
}

impl MockLexicon {
    pub fn validate(&self) -> Result<(), ScorerError> {
        for (qid, entry) in &self.queries {
            if entry.keywords.is_empty() {
                return Err(ScorerError::Lexicon(format!("{qid:?} has no keywords")));
            }
            for kw in &entry.keywords {
                if kw.is_empty() || *kw != kw.to_lowercase() {
                    return Err(ScorerError::Lexicon(format!(
                        "{qid:?}: keyword {kw:?} must be non-empty lowercase"
                    )));
                }
            }
            if !entry.alpha.is_finite() || !entry.beta.is_finite() {
                return Err(ScorerError::Lexicon(format!("{qid:?}: alpha and beta must be finite")));
            }
        }
        if let Some(noise) = self.noise {
            if !(noise.sd.is_finite() && noise.sd >= 0.0) {
                return Err(ScorerError::Lexicon("noise sd must be finite and >= 0".into()));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ScorerError> {
        let content = std::fs::read_to_string(path)
            .map_err(|e| ScorerError::Lexicon(format!("{}: {e}", path.display())))?;
        let lexicon: MockLexicon = serde_json::from_str(&content)
            .map_err(|e| ScorerError::Lexicon(format!("{}: {e}", path.display())))?;
        lexicon.validate()?;
        Ok(lexicon)
    }

    pub fn with_noise(mut self, noise: Option<MockNoise>) -> Self {
        self.noise = noise;
        self
    }
}

/// Number of case-insensitive, non-overlapping keyword occurrences in `text`.
pub(crate) fn keyword_count(text: &str, keywords: &[String]) -> usize {
    let lower = text.to_lowercase();
    keywords.iter().map(|kw| lower.matches(kw.as_str()).count()).sum()
}

fn noise_draw(noise: &MockNoise, prompt: &str) -> f64 {
    let digest = Sha256::new()
        .chain_update(noise.seed.to_le_bytes())
        .chain_update(prompt.as_bytes())
        .finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(seed);
    Normal::new(0.0, noise.sd)
        .expect("validated sd")
        .sample(&mut rng)
}

/// `logprob_yes = alpha * k + beta` where `k` counts lexicon keywords in the
/// prompt's fenced source text; `logprob_no = 0`.
pub fn mock_score(
    request: &ScoreRequest,
    lexicon: &MockLexicon,
    query_id: &str,
) -> Result<ScoreResponse, ScorerError> {
    request.validate()?;
    let entry = lexicon
        .queries
        .get(query_id)
        .ok_or_else(|| ScorerError::UnknownQuery(query_id.to_string()))?;
    let text = prompt::embedded_text(&request.prompt).ok_or_else(|| {
        ScorerError::InvalidRequest("prompt has no delimited source text".into())
    })?;
    let k = keyword_count(text, &entry.keywords);
    let mut logprob_yes = entry.alpha * k as f64 + entry.beta;
    if let Some(noise) = &lexicon.noise {
        if noise.sd > 0.0 {
            logprob_yes += noise_draw(noise, &request.prompt);
        }
    }
    Ok(ScoreResponse {
        logprob_yes,
        logprob_no: 0.0,
        prompt_token_count: None,
    })
}

/// Deterministic keyword-count scorer standing in for an LLM.
#[derive(Debug)]
pub struct MockScorer {
    lexicon: MockLexicon,
    identity: String,
    calls: AtomicUsize,
}

impl MockScorer {
    pub fn new(lexicon: MockLexicon) -> Self {
        let canonical = serde_json::to_string(&lexicon).expect("lexicon serializes");
        let identity = format!("mock:{}", &crate::hash::digest_str(&canonical)[..16]);
        MockScorer {
            lexicon,
            identity,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn lexicon(&self) -> &MockLexicon {
        &self.lexicon
    }

    /// Number of `score` calls served so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

impl Scorer for MockScorer {
    fn identity(&self) -> String {
        self.identity.clone()
    }

    fn score(&self, request: &ScoreRequest) -> Result<ScoreResponse, ScorerError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let query_id = request.query_id.as_deref().ok_or_else(|| {
            ScorerError::InvalidRequest("mock scorer needs the request's query id".into())
        })?;
        mock_score(request, &self.lexicon, query_id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::CLINICAL_NOTE;
    use proptest::prelude::*;

    fn lexicon(alpha: f64, beta: f64) -> MockLexicon {
        let mut queries = BTreeMap::new();
        queries.insert(
            "q".to_string(),
            LexiconEntry {
                keywords: vec!["edema".into()],
                alpha,
                beta,
            },
        );
        MockLexicon {
            queries,
            noise: None,
        }
    }

    fn request(text: &str) -> ScoreRequest {
        ScoreRequest::for_query(CLINICAL_NOTE.render(text, "Is there edema?"), "q")
    }

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn one_keyword_gives_half() {
        let r = mock_score(&request("mild Edema noted"), &lexicon(1.0, -1.0), "q").unwrap();
        assert_eq!(r.logprob_yes, 0.0);
        assert_eq!(r.logprob_no, 0.0);
        assert_eq!(sigmoid(r.logprob_yes - r.logprob_no), 0.5);
    }

    #[test]
    fn zero_and_three_keywords() {
        // sigma(-1) = 0.2689414213699951207488..., sigma(2) = 0.8807970779778824440597...
        // (50-digit evaluation with mpmath).
        let lex = lexicon(1.0, -1.0);
        let none = mock_score(&request("clear lungs"), &lex, "q").unwrap();
        assert!((sigmoid(none.logprob_yes) - 0.268_941_421_369_995_1).abs() < 1e-15);
        let three = mock_score(&request("edema edema EDEMA"), &lex, "q").unwrap();
        assert_eq!(three.logprob_yes, 2.0);
        assert!((sigmoid(three.logprob_yes) - 0.880_797_077_977_882_4).abs() < 1e-15);
    }

    #[test]
    fn question_text_is_not_counted() {
        // "edema" appears in the question but not in the fenced source text.
        let r = mock_score(&request("nothing"), &lexicon(1.0, 0.0), "q").unwrap();
        assert_eq!(r.logprob_yes, 0.0);
    }

    #[test]
    fn unknown_query_rejected() {
        let err = mock_score(&request("x"), &lexicon(1.0, 0.0), "zzz").unwrap_err();
        assert!(matches!(err, ScorerError::UnknownQuery(q) if q == "zzz"));
    }

    #[test]
    fn lexicon_validation() {
        let mut lex = lexicon(f64::NAN, 0.0);
        assert!(lex.validate().is_err());
        lex = lexicon(1.0, 0.0);
        lex.queries.get_mut("q").unwrap().keywords = vec!["Edema".into()];
        assert!(lex.validate().is_err());
        lex.queries.get_mut("q").unwrap().keywords.clear();
        assert!(lex.validate().is_err());
    }

    #[test]
    fn noise_is_deterministic_per_prompt() {
        let lex = lexicon(1.0, 0.0).with_noise(Some(MockNoise { sd: 1.0, seed: 3 }));
        let a = mock_score(&request("edema"), &lex, "q").unwrap();
        let b = mock_score(&request("edema"), &lex, "q").unwrap();
        let c = mock_score(&request("edema!"), &lex, "q").unwrap();
        assert_eq!(a.logprob_yes.to_bits(), b.logprob_yes.to_bits());
        assert_ne!(a.logprob_yes, 1.0);
        assert_ne!(a.logprob_yes, c.logprob_yes);
    }

    proptest! {
        #[test]
        fn more_keywords_strictly_raise_logprob(
            alpha in 0.01f64..5.0,
            beta in -5.0f64..5.0,
            k in 0usize..20,
        ) {
            let lex = lexicon(alpha, beta);
            let base = "edema ".repeat(k);
            let more = "edema ".repeat(k + 1);
            let a = mock_score(&request(&base), &lex, "q").unwrap();
            let b = mock_score(&request(&more), &lex, "q").unwrap();
            prop_assert!(b.logprob_yes > a.logprob_yes);
            let again = mock_score(&request(&base), &lex, "q").unwrap();
            prop_assert_eq!(a.logprob_yes.to_bits(), again.logprob_yes.to_bits());
        }
    }
}

//! Comparison systems: a TF-IDF bag-of-words logistic model and direct
//! zero-shot scoring of the downstream question.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Document, FeatureQuery};
use crate::extract::{ChunkingConfig, ExtractError, Extractor};
use crate::linear::{self, sigmoid, Rows, TrainConfig, TrainError};
use crate::scorer::Scorer;

pub const VOCAB_SIZES: [usize; 4] = [30, 100, 1000, 30000];

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("cannot fit TF-IDF on an empty corpus")]
    EmptyCorpus,
    #[error("vocabulary size must be positive")]
    ZeroVocabulary,
    #[error("invalid vocabulary file: {0}")]
    VocabularyFile(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Extract(#[from] ExtractError),
}

/// Lowercased maximal alphanumeric runs.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TfidfVocabulary {
    /// Most frequent first, ties lexicographic.
    pub terms: Vec<String>,
    pub df: Vec<usize>,
    pub n: usize,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl TfidfVocabulary {
    fn new(terms: Vec<String>, df: Vec<usize>, n: usize) -> Result<Self, BaselineError> {
        if terms.len() != df.len() {
            return Err(BaselineError::VocabularyFile("terms and df differ in length".into()));
        }
        if df.iter().any(|&d| d == 0 || d > n) {
            return Err(BaselineError::VocabularyFile("df must be in 1..=n".into()));
        }
        let index: HashMap<String, usize> = terms.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
        if index.len() != terms.len() {
            return Err(BaselineError::VocabularyFile("duplicate term".into()));
        }
        Ok(TfidfVocabulary { terms, df, n, index })
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn index_of(&self, term: &str) -> Option<usize> {
        self.index.get(term).copied()
    }

    /// Smoothed inverse document frequency `ln((1 + n) / (1 + df)) + 1`.
    pub fn idf(&self, j: usize) -> f64 {
        ((1.0 + self.n as f64) / (1.0 + self.df[j] as f64)).ln() + 1.0
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("vocabulary serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, BaselineError> {
        #[derive(Deserialize)]
        struct Wire {
            terms: Vec<String>,
            df: Vec<usize>,
            n: usize,
        }
        let w: Wire = serde_json::from_str(s).map_err(|e| BaselineError::VocabularyFile(e.to_string()))?;
        Self::new(w.terms, w.df, w.n)
    }
}

pub fn fit_tfidf<'a, I>(train_texts: I, vocab_size: usize) -> Result<TfidfVocabulary, BaselineError>
where
    I: IntoIterator<Item = &'a str>,
{
    if vocab_size == 0 {
        return Err(BaselineError::ZeroVocabulary);
    }
    let mut df: HashMap<String, usize> = HashMap::new();
    let mut n = 0;
    for text in train_texts {
        n += 1;
        let mut seen: Vec<String> = tokenize(text).collect();
        seen.sort_unstable();
        seen.dedup();
        for t in seen {
            *df.entry(t).or_default() += 1;
        }
    }
    if n == 0 {
        return Err(BaselineError::EmptyCorpus);
    }
    let mut ranked: Vec<(String, usize)> = df.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(vocab_size);
    let (terms, df) = ranked.into_iter().unzip();
    TfidfVocabulary::new(terms, df, n)
}

/// L2-normalized `count * idf` vector as `(term index, value)` pairs sorted
/// by index. A document with no in-vocabulary term maps to the empty vector.
pub fn tfidf_features(text: &str, vocab: &TfidfVocabulary) -> Vec<(usize, f64)> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for t in tokenize(text) {
        if let Some(j) = vocab.index_of(&t) {
            *counts.entry(j).or_default() += 1;
        }
    }
    let mut row: Vec<(usize, f64)> = counts
        .into_iter()
        .map(|(j, c)| (j, c as f64 * vocab.idf(j)))
        .collect();
    let norm = row.iter().map(|(_, v)| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        row.iter_mut().for_each(|(_, v)| *v /= norm);
    }
    row
}

/// Logistic model over TF-IDF rows.
#[derive(Debug, Clone, PartialEq)]
pub struct TfidfModel {
    pub vocab: TfidfVocabulary,
    pub weights: Vec<f64>,
    pub intercept: f64,
}

impl TfidfModel {
    /// Fits the vocabulary on `train` texts, then the classifier on its rows.
    pub fn fit(
        train: &[&Document],
        labels: &[bool],
        task: &str,
        vocab_size: usize,
        cfg: &TrainConfig,
    ) -> Result<Self, BaselineError> {
        let vocab = fit_tfidf(train.iter().map(|d| d.text.as_str()), vocab_size)?;
        let rows: Vec<Vec<(usize, f64)>> = train.par_iter().map(|d| tfidf_features(&d.text, &vocab)).collect();
        let fit = linear::fit_rows(
            Rows::Sparse {
                rows: &rows,
                n_cols: vocab.len(),
            },
            labels,
            task,
            cfg,
        )?;
        Ok(TfidfModel {
            vocab,
            weights: fit.weights,
            intercept: fit.intercept,
        })
    }

    pub fn predict_proba(&self, docs: &[&Document]) -> Vec<f64> {
        docs.par_iter()
            .map(|d| {
                let z: f64 = tfidf_features(&d.text, &self.vocab)
                    .iter()
                    .map(|&(j, v)| self.weights[j] * v)
                    .sum();
                sigmoid(z + self.intercept)
            })
            .collect()
    }
}

/// Calibrated answer to the downstream question itself, used directly as the
/// ranking score. Shares the extraction path with feature queries.
pub fn zero_shot_downstream(
    doc: &Document,
    query: &FeatureQuery,
    scorer: &dyn Scorer,
    cfg: ChunkingConfig,
) -> Result<f64, BaselineError> {
    Ok(Extractor::new(scorer, cfg).feature(doc, query)?)
}

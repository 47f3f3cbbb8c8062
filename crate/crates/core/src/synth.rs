//! Synthetic corpus with planted keyword features and a logistic labeler.
//!
//! Each document samples latent binary features; an active feature plants one
//! of its surface forms one or two times among filler pseudo-words. Labels
//! come from a fixed logistic model over the latent features, and the latent
//! indicators are emitted as reference features. With the matching mock
//! lexicon the extracted feature is above one half exactly when a form was
//! planted.

use std::collections::BTreeMap;
use std::io;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Document, FeatureQuery, QuerySet, Split, Support};
use crate::scorer::{LexiconEntry, MockLexicon};

pub const LEXICON_ALPHA: f64 = 2.0;
pub const LEXICON_BETA: f64 = -1.0;

/// `(query_id, surface forms, prevalence)` for the twelve latent features.
/// A planted mention uses one of the forms, so a bag-of-words model has to
/// spread weight over all of them while the extracted feature pools them.
const FEATURES: [(&str, &[&str], f64); 12] = [
    ("edema", &["edema", "anasarca", "swelling", "hypervolemia"], 0.35),
    ("effusion", &["effusion", "hemothorax", "hydrothorax", "pleurisy"], 0.30),
    ("pneumonia", &["pneumonia", "consolidation", "pneumonitis", "bronchitis"], 0.25),
    ("cardiomegaly", &["cardiomegaly", "cardiopathy", "ventriculomegaly", "megalocardia"], 0.30),
    ("atelectasis", &["atelectasis", "collapse", "hypoinflation", "lobar"], 0.40),
    ("fracture", &["fracture", "comminuted", "avulsion", "fragmentation"], 0.20),
    ("diabetes", &["diabetes", "hyperglycemia", "insulin", "glycosuria"], 0.35),
    ("hypertension", &["hypertension", "hypertensive", "htn", "renovascular"], 0.45),
    ("sepsis", &["sepsis", "septicemia", "bacteremia", "endotoxemia"], 0.20),
    ("anemia", &["anemia", "microcytosis", "pallor", "hypochromia"], 0.30),
    ("cirrhosis", &["cirrhosis", "fibrosis", "varices", "ascites"], 0.25),
    ("stroke", &["stroke", "infarction", "hemiparesis", "aphasia"], 0.20),
];

/// Custom queries (the "w/ custom" additions) are the last ones.
const N_CUSTOM: usize = 2;

type TaskSpec = (&'static str, f64, &'static [(&'static str, f64)]);

/// `(task, intercept, [(feature, weight)])`.
const TASKS: [TaskSpec; 4] = [
    (
        "outcome",
        -4.5,
        &[
            ("sepsis", 7.0),
            ("pneumonia", 6.0),
            ("cirrhosis", 5.0),
            ("anemia", 4.0),
            ("hypertension", -3.5),
            ("stroke", 4.5),
            ("fracture", -3.0),
        ],
    ),
    ("finding/edema", -5.5, &[("edema", 8.0), ("cardiomegaly", 4.0), ("effusion", 2.0)]),
    ("finding/effusion", -5.5, &[("effusion", 8.0), ("atelectasis", 3.0), ("edema", 2.0)]),
    ("finding/pneumonia", -5.0, &[("pneumonia", 8.0), ("atelectasis", 2.5), ("sepsis", 2.5)]),
];

fn forms(words: &[&str]) -> Vec<String> {
    words.iter().map(|w| w.to_string()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub filler_vocabulary: usize,
    pub min_words: usize,
    pub max_words: usize,
    /// Share of documents long enough to span several chunks.
    pub long_fraction: f64,
    pub long_words: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 42,
            n_train: 2000,
            n_test: 500,
            filler_vocabulary: 6000,
            min_words: 40,
            max_words: 300,
            long_fraction: 0.05,
            long_words: 1400,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthTask {
    pub intercept: f64,
    pub weights: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthFeature {
    pub query_id: String,
    pub keywords: Vec<String>,
    pub prevalence: f64,
}

/// The generating model, emitted next to the corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub features: Vec<TruthFeature>,
    pub tasks: BTreeMap<String, TruthTask>,
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub dataset: Dataset,
    pub queries: QuerySet,
    pub downstream: QuerySet,
    pub lexicon: MockLexicon,
    pub truth: GroundTruth,
}

fn filler_words(rng: &mut ChaCha8Rng, n: usize) -> Vec<String> {
    const ONSETS: [&str; 14] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
    const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
    let mut words = std::collections::BTreeSet::new();
    while words.len() < n {
        let syllables = rng.random_range(2..=4);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push_str(ONSETS.choose(rng).expect("non-empty"));
            w.push_str(VOWELS.choose(rng).expect("non-empty"));
        }
        if FEATURES.iter().flat_map(|(_, kws, _)| kws.iter()).all(|kw| !w.contains(kw)) {
            words.insert(w);
        }
    }
    words.into_iter().collect()
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn capitalize(word: &str) -> String {
    let mut chars = word.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

pub fn ground_truth(seed: u64) -> GroundTruth {
    GroundTruth {
        seed,
        features: FEATURES
            .iter()
            .map(|&(q, kws, p)| TruthFeature {
                query_id: q.into(),
                keywords: forms(kws),
                prevalence: p,
            })
            .collect(),
        tasks: TASKS
            .iter()
            .map(|&(task, intercept, weights)| {
                (
                    task.to_string(),
                    TruthTask {
                        intercept,
                        weights: weights.iter().map(|&(q, w)| (q.to_string(), w)).collect(),
                    },
                )
            })
            .collect(),
    }
}

pub fn generate(cfg: &SynthConfig) -> SynthCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let filler = filler_words(&mut rng, cfg.filler_vocabulary.max(1));
    let truth = ground_truth(cfg.seed);

    let n = cfg.n_train + cfg.n_test;
    let mut documents = Vec::with_capacity(n);
    for i in 0..n {
        let latent: Vec<bool> = FEATURES.iter().map(|&(_, _, p)| rng.random_bool(p)).collect();
        let len = if rng.random_bool(cfg.long_fraction) {
            cfg.long_words
        } else {
            rng.random_range(cfg.min_words..=cfg.max_words.max(cfg.min_words))
        };
        let mut words: Vec<String> = (0..len)
            .map(|_| filler.choose(&mut rng).expect("non-empty").clone())
            .collect();
        for (j, &(_, keywords, _)) in FEATURES.iter().enumerate() {
            if !latent[j] {
                continue;
            }
            for _ in 0..rng.random_range(1..=2) {
                let keyword = keywords.choose(&mut rng).expect("non-empty");
                let at = rng.random_range(0..=words.len());
                let token = if rng.random_bool(0.2) {
                    capitalize(keyword)
                } else {
                    keyword.to_string()
                };
                words.insert(at, token);
            }
        }
        let labels = truth
            .tasks
            .iter()
            .map(|(task, t)| {
                let z = t.intercept
                    + FEATURES
                        .iter()
                        .zip(&latent)
                        .filter(|(_, &on)| on)
                        .map(|((q, _, _), _)| t.weights.get(*q).copied().unwrap_or(0.0))
                        .sum::<f64>();
                (task.clone(), rng.random_bool(sigmoid(z)))
            })
            .collect();
        let reference = FEATURES
            .iter()
            .zip(&latent)
            .map(|((q, _, _), &on)| (q.to_string(), on))
            .collect();
        documents.push(Document {
            doc_id: format!("doc-{i:05}"),
            text: words.join(" "),
            labels,
            split: if i < cfg.n_train { Split::Train } else { Split::Test },
            reference_features: Some(reference),
        });
    }

    let n_features = FEATURES.len();
    let queries = QuerySet {
        name: "synthetic".into(),
        downstream: false,
        queries: FEATURES
            .iter()
            .enumerate()
            .map(|(j, &(q, kws, _))| {
                let kw = kws[0];
                let custom = j >= n_features - N_CUSTOM;
                let question = if custom {
                    format!("Does this mean the patient has {kw}?")
                } else {
                    format!("Does the patient have {kw}?")
                };
                let support = truth
                    .tasks
                    .iter()
                    .map(|(task, t)| {
                        let s = if t.weights.get(q).is_some_and(|&w| w > 0.0) {
                            Support::Supports
                        } else {
                            Support::NotRelevant
                        };
                        (task.clone(), s)
                    })
                    .collect();
                FeatureQuery {
                    query_id: q.into(),
                    question,
                    template_id: "mimic".into(),
                    custom,
                    expected_support: Some(support),
                }
            })
            .collect(),
    };

    let downstream = QuerySet {
        name: "synthetic-downstream".into(),
        downstream: true,
        queries: truth
            .tasks
            .keys()
            .map(|task| FeatureQuery {
                query_id: task.clone(),
                question: format!("Is the answer to {task:?} yes?"),
                template_id: "mimic".into(),
                custom: false,
                expected_support: None,
            })
            .collect(),
    };

    let mut entries: BTreeMap<String, LexiconEntry> = FEATURES
        .iter()
        .map(|&(q, kws, _)| {
            (
                q.to_string(),
                LexiconEntry {
                    keywords: forms(kws),
                    alpha: LEXICON_ALPHA,
                    beta: LEXICON_BETA,
                },
            )
        })
        .collect();
    for (task, t) in &truth.tasks {
        let keywords: Vec<String> = FEATURES
            .iter()
            .filter(|(q, _, _)| t.weights.get(*q).is_some_and(|&w| w > 0.0))
            .flat_map(|&(_, kws, _)| forms(kws))
            .collect();
        entries.insert(
            task.clone(),
            LexiconEntry {
                keywords,
                alpha: 1.0,
                beta: -2.0,
            },
        );
    }

    SynthCorpus {
        dataset: Dataset::new(documents).expect("generated ids are unique"),
        queries,
        downstream,
        lexicon: MockLexicon {
            queries: entries,
            noise: None,
        },
        truth,
    }
}

pub const EXPERIMENT_TOML: &str = r#"dataset = "dataset.jsonl"
queries = "queries.json"
downstream_queries = "downstream.json"
scorer = "mock:lexicon.json"
output_dir = "out"
seed = 42
"#;

impl SynthCorpus {
    /// Writes `dataset.jsonl`, `queries.json`, `downstream.json`,
    /// `lexicon.json`, `truth.json`, and `experiment.toml` into `dir`.
    pub fn write(&self, dir: &Path) -> io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("dataset.jsonl"), self.dataset.to_jsonl())?;
        std::fs::write(dir.join("queries.json"), pretty(&self.queries))?;
        std::fs::write(dir.join("downstream.json"), pretty(&self.downstream))?;
        std::fs::write(dir.join("lexicon.json"), pretty(&self.lexicon))?;
        std::fs::write(dir.join("truth.json"), pretty(&self.truth))?;
        std::fs::write(dir.join("experiment.toml"), EXPERIMENT_TOML)?;
        Ok(())
    }
}

fn pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializes");
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scorer::mock;

    fn small() -> SynthConfig {
        SynthConfig {
            n_train: 60,
            n_test: 20,
            filler_vocabulary: 300,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_for_a_seed() {
        let a = generate(&small());
        let b = generate(&small());
        assert_eq!(a.dataset, b.dataset);
        let c = generate(&SynthConfig { seed: 7, ..small() });
        assert_ne!(a.dataset, c.dataset);
    }

    #[test]
    fn keyword_planted_iff_reference() {
        let corpus = generate(&small());
        for doc in corpus.dataset.documents() {
            for (q, kws, _) in FEATURES {
                let k = mock::keyword_count(&doc.text, &forms(kws));
                assert_eq!(k >= 1, doc.reference(q).unwrap(), "{} {q}", doc.doc_id);
                assert!(k <= 2);
            }
        }
    }

    #[test]
    fn surface_forms_do_not_overlap() {
        let all: Vec<&str> = FEATURES.iter().flat_map(|(_, kws, _)| kws.iter().copied()).collect();
        for (i, a) in all.iter().enumerate() {
            assert!(!a.contains(char::is_whitespace));
            for (j, b) in all.iter().enumerate() {
                assert!(i == j || !a.contains(b), "{a} contains {b}");
            }
        }
    }

    #[test]
    fn queries_and_splits() {
        let corpus = generate(&small());
        corpus.queries.validate().unwrap();
        corpus.dataset.check_queries(&corpus.queries).unwrap();
        assert_eq!(corpus.queries.len(), 12);
        assert_eq!(corpus.queries.without_custom().len(), 10);
        assert_eq!(corpus.dataset.split(Split::Train).count(), 60);
        assert_eq!(corpus.dataset.split(Split::Test).count(), 20);
        corpus.lexicon.validate().unwrap();
        assert!(corpus.downstream.downstream);
        assert_eq!(corpus.downstream.len(), corpus.dataset.tasks().len());
    }
}

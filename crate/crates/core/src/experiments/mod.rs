//! End-to-end studies over one dataset and query set: extraction fidelity,
//! the downstream comparison grid, learning curves, and feature ablation.
//!
//! Features are extracted once per experiment (through the feature cache)
//! and shared by every study.

mod config;
mod report;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::{Arc, OnceLock};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{Baselines, ExperimentConfig, FeatureKind, Variant, DEFAULT_ABLATION_REPEATS, DEFAULT_FRACTIONS};
pub use report::{write_report, Manifest, ManifestProvenance};

use crate::baselines::{BaselineError, TfidfModel};
use crate::data::{load_dataset, load_queries, DataError, Dataset, Document, QuerySet, Split};
use crate::eval::{self, auroc, auroc_report, bootstrap_ci, classification_metrics, macro_average, EvalError, MetricReport};
use crate::extract::{binarize, ExtractError, ExtractOptions, Extractor, FeatureMatrix, Provenance};
use crate::hash::Fingerprint;
use crate::linear::{self, LinearModel, TrainError};
use crate::scorer::{open_scorer, MockLexicon, MockScorer, Scorer, ScorerError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("experiment config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Scorer(#[from] ScorerError),
    #[error(transparent)]
    Extract(#[from] ExtractError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error("dataset has no reference features")]
    NoReference,
    #[error("{0}")]
    Unavailable(String),
}

/// A row source for the downstream grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Method {
    Inferred(Variant),
    GroundTruth,
    Tfidf(usize),
    ZeroShot,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Method::Inferred(v) => write!(f, "inferred-{v}"),
            Method::GroundTruth => write!(f, "ground-truth"),
            Method::Tfidf(n) => write!(f, "tfidf-{n}"),
            Method::ZeroShot => write!(f, "zero-shot"),
        }
    }
}

/// Stable 64-bit seed derived from a base seed and a path of names.
pub fn derive_seed(seed: u64, parts: &[&str]) -> u64 {
    let mut fp = Fingerprint::new().part(seed.to_le_bytes());
    for p in parts {
        fp = fp.part(p);
    }
    let digest = fp.finish();
    u64::from_str_radix(&digest[..16], 16).expect("hex digest")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub method: String,
    pub task: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<MetricReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Binary minus continuous AUROC for one task and custom setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Delta {
    pub task: String,
    pub custom: bool,
    pub binary: f64,
    pub continuous: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub rows: Vec<GridRow>,
    pub deltas: Vec<Delta>,
}

impl GridReport {
    pub fn get(&self, method: &str, task: &str) -> Option<&GridRow> {
        self.rows.iter().find(|r| r.method == method && r.task == task)
    }

    pub fn point(&self, method: &str, task: &str) -> Option<f64> {
        self.get(method, task)?.report.as_ref()?.point_estimate
    }

    pub fn failed_rows(&self) -> impl Iterator<Item = &GridRow> {
        self.rows.iter().filter(|r| r.error.is_some())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityRow {
    pub query_id: String,
    pub n: usize,
    pub positives: usize,
    /// Omitted when the query has no positive (or no negative) reference.
    pub auroc: Option<f64>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub rows: Vec<FidelityRow>,
    pub mean_auroc: Option<f64>,
    pub mean_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub x: f64,
    pub y: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub variant: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskCurve {
    pub task: String,
    pub points: Vec<CurvePoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveReport {
    pub variant: String,
    pub curves: Vec<TaskCurve>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationMode {
    Random,
    Magnitude,
}

impl std::str::FromStr for AblationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "random" => Ok(AblationMode::Random),
            "magnitude" => Ok(AblationMode::Magnitude),
            _ => Err(format!("unknown ablation mode {s:?} (random|magnitude)")),
        }
    }
}

impl std::fmt::Display for AblationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AblationMode::Random => "random",
            AblationMode::Magnitude => "magnitude",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub mode: AblationMode,
    pub variant: String,
    pub repeats: usize,
    /// `x` is the number of features kept; `y` the AUROC averaged over all labels.
    pub points: Vec<CurvePoint>,
    pub area: f64,
}

/// Trapezoid area under `(x, y)` points, skipping undefined ones.
pub fn curve_area(points: &[CurvePoint]) -> f64 {
    let defined: Vec<(f64, f64)> = points.iter().filter_map(|p| p.y.map(|y| (p.x, y))).collect();
    defined
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

/// Spearman rank correlation, average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut order: Vec<usize> = (0..v.len()).collect();
        order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < order.len() {
            let mut j = i;
            while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &order[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

/// Per-label test scores of one trained method.
struct LabelScores<'a> {
    docs: Vec<&'a Document>,
    scores: Vec<f64>,
    labels: Vec<bool>,
}

/// Training-set selection for one label: everything, or a stratified
/// fraction.
#[derive(Clone, Copy)]
enum TrainSubset {
    All,
    Fraction(f64),
}

pub struct Experiment {
    pub config: ExperimentConfig,
    pub dataset: Dataset,
    pub queries: QuerySet,
    pub downstream: Option<QuerySet>,
    scorer: Arc<dyn Scorer>,
    features: OnceLock<FeatureMatrix>,
    zero_shot: OnceLock<FeatureMatrix>,
}

impl Experiment {
    /// Loads inputs and builds the scorer named by `config`.
    pub fn open(config: ExperimentConfig) -> Result<Self, ExperimentError> {
        config.validate()?;
        let dataset = load_dataset(config.resolve(&config.dataset))?;
        let queries = load_queries(config.resolve(&config.queries))?;
        let downstream = match &config.downstream_queries {
            Some(p) => Some(load_queries(config.resolve(p))?),
            None => None,
        };
        let scorer: Arc<dyn Scorer> = match (&config.noise, config.scorer_spec().strip_prefix("mock:")) {
            (Some(noise), Some(path)) => {
                Arc::new(MockScorer::new(MockLexicon::load(Path::new(path))?.with_noise(Some(*noise))))
            }
            _ => open_scorer(&config.scorer_spec())?,
        };
        Self::from_parts(config, dataset, queries, downstream, scorer)
    }

    pub fn from_parts(
        config: ExperimentConfig,
        dataset: Dataset,
        queries: QuerySet,
        downstream: Option<QuerySet>,
        scorer: Arc<dyn Scorer>,
    ) -> Result<Self, ExperimentError> {
        if config.variants.is_empty() {
            return Err(ExperimentError::Config("variants must not be empty".into()));
        }
        dataset.check_queries(&queries)?;
        Ok(Experiment {
            config,
            dataset,
            queries,
            downstream,
            scorer,
            features: OnceLock::new(),
            zero_shot: OnceLock::new(),
        })
    }

    pub fn scorer(&self) -> &dyn Scorer {
        self.scorer.as_ref()
    }

    /// Continuous features for every query, extracted once through the cache.
    pub fn features(&self) -> Result<&FeatureMatrix, ExperimentError> {
        if let Some(m) = self.features.get() {
            return Ok(m);
        }
        let cache = self.config.cache_path();
        let m = Extractor::new(self.scorer.as_ref(), self.config.chunking).run(
            &self.dataset,
            &self.queries,
            ExtractOptions {
                cache: Some(&cache),
                progress: None,
            },
        )?;
        Ok(self.features.get_or_init(|| m))
    }

    fn zero_shot_matrix(&self) -> Result<&FeatureMatrix, ExperimentError> {
        if let Some(m) = self.zero_shot.get() {
            return Ok(m);
        }
        let downstream = self
            .downstream
            .as_ref()
            .ok_or_else(|| ExperimentError::Unavailable("no downstream queries configured".into()))?;
        let cache = self.config.cache_path().with_file_name("zero_shot.csv");
        let m = Extractor::new(self.scorer.as_ref(), self.config.chunking).run(
            &self.dataset,
            downstream,
            ExtractOptions {
                cache: Some(&cache),
                progress: None,
            },
        )?;
        Ok(self.zero_shot.get_or_init(|| m))
    }

    /// Feature columns for `variant`: custom queries dropped if requested,
    /// values binarized for the binary kind.
    pub fn variant_matrix(&self, variant: Variant) -> Result<FeatureMatrix, ExperimentError> {
        Ok(variant_features(self.features()?, &self.queries, variant)?)
    }

    /// Reference indicators as a 0/1 matrix over every query.
    pub fn reference_matrix(&self) -> Result<FeatureMatrix, ExperimentError> {
        if !self.dataset.has_reference_features() {
            return Err(ExperimentError::NoReference);
        }
        let ids = self.queries.ids();
        let mut values = Vec::with_capacity(self.dataset.len() * ids.len());
        for doc in self.dataset.documents() {
            for q in &ids {
                let v = doc.reference(q).ok_or_else(|| {
                    ExperimentError::Unavailable(format!(
                        "document {:?} has no reference value for {q:?}",
                        doc.doc_id
                    ))
                })?;
                values.push(if v { 1.0 } else { 0.0 });
            }
        }
        Ok(FeatureMatrix::new(
            self.dataset.documents().iter().map(|d| d.doc_id.clone()).collect(),
            ids,
            values,
            Provenance::external("reference", self.dataset.content_hash()),
        )?)
    }

    fn method_matrix(&self, method: Method) -> Result<FeatureMatrix, ExperimentError> {
        match method {
            Method::Inferred(v) => self.variant_matrix(v),
            Method::GroundTruth => self.reference_matrix(),
            Method::Tfidf(_) | Method::ZeroShot => unreachable!("not a feature-matrix method"),
        }
    }

    /// Trains the model for `task` on the train split of `variant`'s features.
    pub fn train_model(&self, task: &str, variant: Variant) -> Result<LinearModel, ExperimentError> {
        let m = self.variant_matrix(variant)?;
        Ok(linear::train_task(&m, &self.dataset, task, &self.config.train_config())?)
    }

    fn train_rows(&self, label: &str, subset: TrainSubset) -> Vec<(&Document, bool)> {
        let all = self.dataset.labeled(label, Split::Train);
        let fraction = match subset {
            TrainSubset::All => return all,
            TrainSubset::Fraction(f) if f >= 1.0 => return all,
            TrainSubset::Fraction(f) => f,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            self.config.seed,
            &["subsample", label, &fraction.to_string()],
        ));
        let mut keep = Vec::new();
        for class in [true, false] {
            let mut idx: Vec<usize> = (0..all.len()).filter(|&i| all[i].1 == class).collect();
            idx.shuffle(&mut rng);
            let take = (fraction * idx.len() as f64).round() as usize;
            keep.extend_from_slice(&idx[..take]);
        }
        keep.sort_unstable();
        keep.into_iter().map(|i| all[i]).collect()
    }

    fn label_scores(&self, method: Method, label: &str, subset: TrainSubset) -> Result<LabelScores<'_>, ExperimentError> {
        let test = self.dataset.labeled(label, Split::Test);
        let docs: Vec<&Document> = test.iter().map(|(d, _)| *d).collect();
        let labels: Vec<bool> = test.iter().map(|&(_, y)| y).collect();
        let train = self.train_rows(label, subset);
        let train_labels: Vec<bool> = train.iter().map(|&(_, y)| y).collect();
        let scores = match method {
            Method::Inferred(_) | Method::GroundTruth => {
                let m = self.method_matrix(method)?;
                let ids: Vec<String> = train.iter().map(|(d, _)| d.doc_id.clone()).collect();
                let model = linear::train(&m.select_rows(&ids)?, &train_labels, label, &self.config.train_config())?;
                let test_ids: Vec<String> = docs.iter().map(|d| d.doc_id.clone()).collect();
                linear::predict_proba(&model, &m.select_rows(&test_ids)?)?
            }
            Method::Tfidf(size) => {
                let train_docs: Vec<&Document> = train.iter().map(|(d, _)| *d).collect();
                let model = TfidfModel::fit(&train_docs, &train_labels, label, size, &self.config.train_config())?;
                model.predict_proba(&docs)
            }
            Method::ZeroShot => {
                let m = self.zero_shot_matrix()?;
                let j = m.col_index(label).ok_or_else(|| {
                    ExperimentError::Unavailable(format!("no downstream query for task {label:?}"))
                })?;
                docs.iter()
                    .map(|d| m.row_for(&d.doc_id).expect("every document extracted")[j])
                    .collect()
            }
        };
        Ok(LabelScores { docs, scores, labels })
    }

    /// AUROC report for one report unit (a single task, or a multi-label
    /// group macro-averaged over its labels), with bootstrap intervals.
    fn unit_report(&self, method: Method, unit: &str, labels: &[String], subset: TrainSubset) -> Result<MetricReport, ExperimentError> {
        let resamples = self.config.bootstrap_resamples;
        let per_label: Vec<LabelScores<'_>> = labels
            .iter()
            .map(|l| self.label_scores(method, l, subset))
            .collect::<Result<_, _>>()?;
        if labels.len() == 1 && labels[0] == unit {
            let s = &per_label[0];
            let seed = derive_seed(self.config.seed, &["bootstrap", unit]);
            return Ok(auroc_report(&s.scores, &s.labels, resamples, seed).with_label(unit));
        }
        let reports: Vec<MetricReport> = labels
            .iter()
            .zip(&per_label)
            .map(|(l, s)| {
                let seed = derive_seed(self.config.seed, &["bootstrap", l]);
                auroc_report(&s.scores, &s.labels, resamples, seed).with_label(l)
            })
            .collect();
        let mut report = macro_average("auroc", reports)?.with_label(unit);
        if resamples == 0 || !report.is_defined() {
            return Ok(report);
        }
        // Resample documents of the whole group; each label sees the drawn
        // documents it is labeled on.
        let mut unit_docs: Vec<&str> = per_label.iter().flat_map(|s| s.docs.iter().map(|d| d.doc_id.as_str())).collect();
        unit_docs.sort_unstable();
        unit_docs.dedup();
        let position: BTreeMap<&str, usize> = unit_docs.iter().enumerate().map(|(i, d)| (*d, i)).collect();
        let columns: Vec<Vec<Option<(f64, bool)>>> = per_label
            .iter()
            .zip(&report.per_label)
            .filter(|(_, r)| r.is_defined())
            .map(|(s, _)| {
                let mut col = vec![None; unit_docs.len()];
                for ((d, &score), &y) in s.docs.iter().zip(&s.scores).zip(&s.labels) {
                    col[position[d.doc_id.as_str()]] = Some((score, y));
                }
                col
            })
            .collect();
        let stat = |idx: &[usize]| {
            let mut total = 0.0;
            for col in &columns {
                let (s, y): (Vec<f64>, Vec<bool>) = idx.iter().filter_map(|&i| col[i]).unzip();
                total += auroc(&s, &y).ok()?;
            }
            Some(total / columns.len() as f64)
        };
        let seed = derive_seed(self.config.seed, &["bootstrap", unit]);
        match bootstrap_ci(stat, unit_docs.len(), resamples, seed) {
            Ok(interval) => report = report.with_interval(&interval),
            Err(e) => report.note = Some(e.to_string()),
        }
        Ok(report)
    }

    /// One grid cell, computed in isolation.
    pub fn evaluate(&self, method: Method, unit: &str) -> Result<MetricReport, ExperimentError> {
        let labels = self
            .dataset
            .report_units()
            .into_iter()
            .find(|(u, _)| u == unit)
            .map(|(_, l)| l)
            .ok_or_else(|| ExperimentError::Train(TrainError::UnknownTask(unit.to_string())))?;
        self.unit_report(method, unit, &labels, TrainSubset::All)
    }

    pub fn grid_methods(&self) -> Vec<Method> {
        let mut methods: Vec<Method> = self.config.variants.iter().map(|&v| Method::Inferred(v)).collect();
        let b = &self.config.baselines;
        if b.ground_truth && self.dataset.has_reference_features() {
            methods.push(Method::GroundTruth);
        }
        methods.extend(b.tfidf.iter().map(|&n| Method::Tfidf(n)));
        if b.zero_shot && self.downstream.is_some() {
            methods.push(Method::ZeroShot);
        }
        methods
    }

    /// Every method on every report unit, plus binary-minus-continuous deltas.
    /// Failed cells carry the error text instead of a report.
    pub fn downstream_grid(&self) -> Result<GridReport, ExperimentError> {
        // Extract up front so parallel cells share one extraction; a failure
        // only annotates the rows that need it.
        let features_error = self.features().err().map(|e| e.to_string());
        let zero_shot_error = if self.config.baselines.zero_shot && self.downstream.is_some() {
            self.zero_shot_matrix().err().map(|e| e.to_string())
        } else {
            None
        };
        let units = self.dataset.report_units();
        let cells: Vec<(Method, &(String, Vec<String>))> = self
            .grid_methods()
            .into_iter()
            .flat_map(|m| units.iter().map(move |u| (m, u)))
            .collect();
        let rows: Vec<GridRow> = cells
            .par_iter()
            .map(|(method, (unit, labels))| {
                let upstream = match method {
                    Method::Inferred(_) => features_error.clone(),
                    Method::ZeroShot => zero_shot_error.clone(),
                    _ => None,
                };
                let (report, error) = match upstream {
                    Some(e) => (None, Some(e)),
                    None => match self.unit_report(*method, unit, labels, TrainSubset::All) {
                        Ok(r) => (Some(r), None),
                        Err(e) => (None, Some(e.to_string())),
                    },
                };
                GridRow {
                    method: method.to_string(),
                    task: unit.clone(),
                    report,
                    error,
                }
            })
            .collect();
        let mut grid = GridReport { rows, deltas: Vec::new() };
        for (unit, _) in &units {
            for custom in [true, false] {
                let b = Method::Inferred(Variant { kind: FeatureKind::Binary, custom }).to_string();
                let c = Method::Inferred(Variant { kind: FeatureKind::Continuous, custom }).to_string();
                if let (Some(binary), Some(continuous)) = (grid.point(&b, unit), grid.point(&c, unit)) {
                    grid.deltas.push(Delta {
                        task: unit.clone(),
                        custom,
                        binary,
                        continuous,
                        delta: binary - continuous,
                    });
                }
            }
        }
        Ok(grid)
    }

    /// Per-query agreement of extracted features with reference indicators:
    /// AUROC of the continuous values, precision/recall/F1 of the binarized.
    pub fn extraction_fidelity(&self) -> Result<FidelityReport, ExperimentError> {
        extraction_fidelity(self.features()?, &self.dataset)
    }

    /// AUROC against training-set fraction, one curve per task for each
    /// configured variant (plus ground truth when available).
    pub fn learning_curve(&self) -> Result<Vec<CurveReport>, ExperimentError> {
        self.features()?;
        let fractions = self.config.sorted_fractions();
        let mut methods: Vec<Method> = self.config.variants.iter().map(|&v| Method::Inferred(v)).collect();
        if self.config.baselines.ground_truth && self.dataset.has_reference_features() {
            methods.push(Method::GroundTruth);
        }
        let units = self.dataset.report_units();
        methods
            .par_iter()
            .map(|&method| {
                let variant = match method {
                    Method::Inferred(v) => v.to_string(),
                    other => other.to_string(),
                };
                let curves = units
                    .iter()
                    .map(|(unit, labels)| {
                        let points = fractions
                            .iter()
                            .map(|&f| self.curve_point(method, unit, labels, f, &variant))
                            .collect();
                        TaskCurve {
                            task: unit.clone(),
                            points,
                        }
                    })
                    .collect();
                Ok(CurveReport { variant, curves })
            })
            .collect()
    }

    fn curve_point(&self, method: Method, unit: &str, labels: &[String], fraction: f64, variant: &str) -> CurvePoint {
        let subset = if fraction >= 1.0 {
            TrainSubset::All
        } else {
            TrainSubset::Fraction(fraction)
        };
        match self.unit_report(method, unit, labels, subset) {
            Ok(r) => CurvePoint {
                x: fraction,
                y: r.point_estimate,
                ci_low: r.ci_low,
                ci_high: r.ci_high,
                variant: variant.to_string(),
                note: r.note,
            },
            Err(e) => CurvePoint {
                x: fraction,
                y: None,
                ci_low: None,
                ci_high: None,
                variant: variant.to_string(),
                note: Some(format!("skipped: {e}")),
            },
        }
    }

    /// Post-hoc pruning curve: models for every label are trained once, then
    /// features are zeroed in magnitude order (smallest mean |weight| first)
    /// or in random orders, and test AUROC averaged over labels is recorded
    /// at each kept-count.
    pub fn feature_ablation(&self, mode: AblationMode) -> Result<AblationReport, ExperimentError> {
        let variant = self.config.ablation_variant;
        let m = self.variant_matrix(variant)?;
        let cfg = self.config.train_config();
        let mut models = Vec::new();
        for task in self.dataset.tasks() {
            let (rows, labels) = linear::task_rows(&m, &self.dataset, &task.name, Split::Train)?;
            let model = linear::train(&rows, &labels, &task.name, &cfg)?;
            let (test, test_labels) = linear::task_rows(&m, &self.dataset, &task.name, Split::Test)?;
            models.push((model, test, test_labels));
        }
        let ids = m.query_ids().to_vec();
        let n = ids.len();
        let orders: Vec<Vec<String>> = match mode {
            AblationMode::Magnitude => {
                let mut ranked: Vec<(String, f64)> = ids
                    .iter()
                    .map(|q| {
                        let mean = models.iter().map(|(md, _, _)| md.weight(q).unwrap_or(0.0).abs()).sum::<f64>()
                            / models.len() as f64;
                        (q.clone(), mean)
                    })
                    .collect();
                ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
                vec![ranked.into_iter().map(|(q, _)| q).collect()]
            }
            AblationMode::Random => (0..self.config.ablation_repeats.max(1))
                .map(|r| {
                    let mut order = ids.clone();
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, &["ablation", &r.to_string()]));
                    order.shuffle(&mut rng);
                    order
                })
                .collect(),
        };
        let repeats = orders.len();
        let mut points = Vec::with_capacity(n + 1);
        for kept in 0..=n {
            let ys: Vec<f64> = orders
                .par_iter()
                .map(|order| {
                    let drop: BTreeSet<String> = order[kept..].iter().cloned().collect();
                    let mut total = 0.0;
                    let mut count = 0;
                    for (model, test, labels) in &models {
                        let pruned = linear::prune(model, &drop, None)?;
                        if let Ok(a) = auroc(&linear::predict_proba(&pruned, test)?, labels) {
                            total += a;
                            count += 1;
                        }
                    }
                    Ok(if count == 0 { f64::NAN } else { total / count as f64 })
                })
                .collect::<Result<_, ExperimentError>>()?;
            let mut sorted = ys.clone();
            sorted.sort_by(f64::total_cmp);
            let y = ys.iter().sum::<f64>() / repeats as f64;
            let (ci_low, ci_high) = if repeats > 1 {
                (Some(eval::percentile(&sorted, 0.025)), Some(eval::percentile(&sorted, 0.975)))
            } else {
                (None, None)
            };
            points.push(CurvePoint {
                x: kept as f64,
                y: (!y.is_nan()).then_some(y),
                ci_low,
                ci_high,
                variant: variant.to_string(),
                note: None,
            });
        }
        let area = curve_area(&points);
        Ok(AblationReport {
            mode,
            variant: variant.to_string(),
            repeats,
            points,
            area,
        })
    }

    /// Runs `study` and writes its report files plus the manifest.
    pub fn run_study(&self, study: Study) -> Result<StudyOutput, ExperimentError> {
        let files = match study {
            Study::Grid => {
                let grid = self.downstream_grid()?;
                vec![("grid.json".to_string(), report::to_json(&grid))]
            }
            Study::Fidelity => vec![("fidelity.json".to_string(), report::to_json(&self.extraction_fidelity()?))],
            Study::Curve => self
                .learning_curve()?
                .iter()
                .map(|c| (format!("curves/{}.json", c.variant), report::to_json(c)))
                .collect(),
            Study::Ablation(mode) => vec![(
                format!("ablation/{mode}.json"),
                report::to_json(&self.feature_ablation(mode)?),
            )],
        };
        let manifest = write_report(&self.config, self.provenance()?, &files)?;
        Ok(StudyOutput { files, manifest })
    }

    pub fn provenance(&self) -> Result<ManifestProvenance, ExperimentError> {
        Ok(ManifestProvenance {
            dataset: self.dataset.content_hash(),
            queries: self.queries.content_hash(),
            downstream_queries: self.downstream.as_ref().map(QuerySet::content_hash),
            scorer: self.scorer.identity(),
            features: self.features()?.provenance().fingerprint(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Study {
    Grid,
    Fidelity,
    Curve,
    Ablation(AblationMode),
}

#[derive(Debug, Clone)]
pub struct StudyOutput {
    /// `(relative path, contents)` of each report file written.
    pub files: Vec<(String, String)>,
    pub manifest: Manifest,
}

/// The columns of `features` that `variant` trains on, in query-set order:
/// custom queries dropped if requested, values binarized for the binary kind.
pub fn variant_features(
    features: &FeatureMatrix,
    queries: &QuerySet,
    variant: Variant,
) -> Result<FeatureMatrix, ExtractError> {
    let columns = if variant.custom {
        queries.ids()
    } else {
        queries.without_custom().ids()
    };
    let m = features.select_columns(&columns)?;
    Ok(match variant.kind {
        FeatureKind::Continuous => m,
        FeatureKind::Binary => m.binarized(),
    })
}

/// Fidelity of `features` against the dataset's reference indicators, on
/// every document that carries a reference value for the query. Queries
/// without positives (or negatives) get no AUROC; degenerate precision and
/// recall score 0.
pub fn extraction_fidelity(features: &FeatureMatrix, dataset: &Dataset) -> Result<FidelityReport, ExperimentError> {
    if !dataset.has_reference_features() {
        return Err(ExperimentError::NoReference);
    }
    let mut rows = Vec::new();
    for (j, q) in features.query_ids().iter().enumerate() {
        let mut scores = Vec::new();
        let mut refs = Vec::new();
        for doc in dataset.documents() {
            if let (Some(r), Some(i)) = (doc.reference(q), features.row_index(&doc.doc_id)) {
                scores.push(features.row(i)[j]);
                refs.push(r);
            }
        }
        if refs.is_empty() {
            continue;
        }
        let preds: Vec<bool> = scores
            .iter()
            .map(|&v| binarize(v))
            .collect::<Result<_, _>>()?;
        let c = classification_metrics(&preds, &refs)?;
        let positives = refs.iter().filter(|&&r| r).count();
        let (auroc_value, note) = match auroc(&scores, &refs) {
            Ok(a) => (Some(a), None),
            Err(EvalError::IllDefined(m)) => (None, Some(m)),
            Err(e) => return Err(e.into()),
        };
        rows.push(FidelityRow {
            query_id: q.clone(),
            n: refs.len(),
            positives,
            auroc: auroc_value,
            precision: c.precision,
            recall: c.recall,
            f1: c.f1,
            note,
        });
    }
    let aurocs: Vec<f64> = rows.iter().filter_map(|r| r.auroc).collect();
    let mean_auroc = (!aurocs.is_empty()).then(|| aurocs.iter().sum::<f64>() / aurocs.len() as f64);
    let mean_f1 = if rows.is_empty() {
        0.0
    } else {
        rows.iter().map(|r| r.f1).sum::<f64>() / rows.len() as f64
    };
    Ok(FidelityReport { rows, mean_auroc, mean_f1 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), -1.0);
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 1.0, 2.0, 2.0]) - 0.894_427_190_999_915_9).abs() < 1e-12);
    }

    #[test]
    fn area_is_trapezoid() {
        let p = |x: f64, y: f64| CurvePoint {
            x,
            y: Some(y),
            ci_low: None,
            ci_high: None,
            variant: "v".into(),
            note: None,
        };
        assert_eq!(curve_area(&[p(0.0, 0.5), p(1.0, 1.0), p(2.0, 1.0)]), 0.75 + 1.0);
    }

    #[test]
    fn derived_seeds_differ_by_path() {
        assert_ne!(derive_seed(1, &["a"]), derive_seed(1, &["b"]));
        assert_eq!(derive_seed(1, &["a", "b"]), derive_seed(1, &["a", "b"]));
        assert_ne!(derive_seed(1, &["ab"]), derive_seed(1, &["a", "b"]));
    }
}

//! Logistic-regression models over feature columns: training, prediction,
//! per-document explanations, and post-hoc pruning.
//!
//! Columns are always matched by id, never by position. Multi-label tasks get
//! one independent model per label.

pub mod sgd;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, Split};
use crate::extract::FeatureMatrix;
use crate::hash::Fingerprint;
pub use sgd::{sigmoid, Rows};

/// Bumped whenever the optimizer changes in a way that alters fitted weights.
pub const TRAINER_VERSION: &str = "sgd-logistic-1";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("labels for task {task:?} contain a single class ({positives} positives of {n})")]
    SingleClass { task: String, positives: usize, n: usize },
    #[error("features contain non-finite values")]
    NonFinite,
    #[error("{0}")]
    Shape(String),
    #[error("model column {0:?} is missing from the features")]
    MissingColumn(String),
    #[error("cannot drop {0:?}: not a model column")]
    UnknownColumn(String),
    #[error("retraining needs features, labels, and a config")]
    RetrainInputs,
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error("invalid model file: {0}")]
    ModelFile(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LearningRateSchedule {
    /// `η_t = 1 / (λ (t0 + t - 1))`, `t0` derived from `λ`.
    InverseScaling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub l2_strength: f64,
    /// Cap on passes over the data.
    pub epochs: usize,
    /// Minimum per-sample improvement of the epoch training loss.
    pub tolerance: f64,
    /// Consecutive epochs without improvement before stopping.
    pub n_iter_no_change: usize,
    pub learning_rate_schedule: LearningRateSchedule,
    pub seed: u64,
    pub shuffle_each_epoch: bool,
    pub fit_intercept: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            l2_strength: 1e-4,
            epochs: 1000,
            tolerance: 1e-3,
            n_iter_no_change: 5,
            learning_rate_schedule: LearningRateSchedule::InverseScaling,
            seed: 0,
            shuffle_each_epoch: true,
            fit_intercept: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.l2_strength.is_finite() && self.l2_strength >= 0.0) {
            return Err(TrainError::Shape("l2_strength must be finite and >= 0".into()));
        }
        if self.epochs == 0 || self.n_iter_no_change == 0 {
            return Err(TrainError::Shape("epochs and n_iter_no_change must be positive".into()));
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        Fingerprint::new()
            .part(TRAINER_VERSION)
            .part(serde_json::to_string(self).expect("config serializes"))
            .finish()
    }
}

#[derive(Serialize, Deserialize)]
struct StampedConfig {
    trainer_version: String,
    #[serde(flatten)]
    config: TrainConfig,
}

/// Weights keyed by column id, plus the intercept.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub task: String,
    pub query_ids: Vec<String>,
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub train_fingerprint: String,
    pub config: TrainConfig,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    task: String,
    query_ids: Vec<String>,
    weights: Vec<f64>,
    intercept: f64,
    train_fingerprint: String,
    config: StampedConfig,
}

impl LinearModel {
    pub fn to_json(&self) -> String {
        let file = ModelFile {
            task: self.task.clone(),
            query_ids: self.query_ids.clone(),
            weights: self.weights.clone(),
            intercept: self.intercept,
            train_fingerprint: self.train_fingerprint.clone(),
            config: StampedConfig {
                trainer_version: TRAINER_VERSION.to_string(),
                config: self.config.clone(),
            },
        };
        serde_json::to_string_pretty(&file).expect("model serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, TrainError> {
        let file: ModelFile =
            serde_json::from_str(s).map_err(|e| TrainError::ModelFile(e.to_string()))?;
        if file.weights.len() != file.query_ids.len() {
            return Err(TrainError::ModelFile("weights and query_ids differ in length".into()));
        }
        if !file.intercept.is_finite() || file.weights.iter().any(|w| !w.is_finite()) {
            return Err(TrainError::ModelFile("non-finite parameters".into()));
        }
        Ok(LinearModel {
            task: file.task,
            query_ids: file.query_ids,
            weights: file.weights,
            intercept: file.intercept,
            train_fingerprint: file.train_fingerprint,
            config: file.config.config,
        })
    }

    pub fn weight(&self, query_id: &str) -> Option<f64> {
        self.query_ids
            .iter()
            .position(|q| q == query_id)
            .map(|j| self.weights[j])
    }

    /// Column indices of the model's ids within `columns`.
    fn align(&self, columns: &[String]) -> Result<Vec<usize>, TrainError> {
        self.query_ids
            .iter()
            .map(|q| {
                columns
                    .iter()
                    .position(|c| c == q)
                    .ok_or_else(|| TrainError::MissingColumn(q.clone()))
            })
            .collect()
    }

    fn logit(&self, cols: &[usize], row: &[f64]) -> f64 {
        self.weights
            .iter()
            .zip(cols)
            .map(|(w, &j)| w * row[j])
            .sum::<f64>()
            + self.intercept
    }

    /// Coefficients as `(query_id, weight)` sorted by weight descending,
    /// ties by id.
    pub fn ranked(&self) -> Vec<(String, f64)> {
        let mut pairs: Vec<(String, f64)> = self
            .query_ids
            .iter()
            .cloned()
            .zip(self.weights.iter().copied())
            .collect();
        pairs.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        pairs
    }
}

/// Fits a model on `features` (rows aligned with `labels`).
///
/// Columns are trained in id order, so permuting columns permutes the
/// weights and nothing else.
pub fn train(
    features: &FeatureMatrix,
    labels: &[bool],
    task: &str,
    cfg: &TrainConfig,
) -> Result<LinearModel, TrainError> {
    cfg.validate()?;
    if labels.len() != features.n_rows() {
        return Err(TrainError::Shape(format!(
            "{} labels for {} feature rows",
            labels.len(),
            features.n_rows()
        )));
    }
    let mut order: Vec<usize> = (0..features.n_cols()).collect();
    order.sort_by(|&a, &b| features.query_ids()[a].cmp(&features.query_ids()[b]));
    let mut values = Vec::with_capacity(features.values().len());
    for i in 0..features.n_rows() {
        let row = features.row(i);
        values.extend(order.iter().map(|&j| row[j]));
    }
    let fit = fit_rows(
        Rows::Dense {
            values: &values,
            n_cols: order.len(),
        },
        labels,
        task,
        cfg,
    )?;
    let mut weights = vec![0.0; order.len()];
    for (k, &j) in order.iter().enumerate() {
        weights[j] = fit.weights[k];
    }
    Ok(LinearModel {
        task: task.to_string(),
        query_ids: features.query_ids().to_vec(),
        weights,
        intercept: fit.intercept,
        train_fingerprint: train_fingerprint(cfg, &features.provenance().fingerprint(), features.query_ids()),
        config: cfg.clone(),
    })
}

pub(crate) fn train_fingerprint(cfg: &TrainConfig, source: &str, columns: &[String]) -> String {
    let mut fp = Fingerprint::new().part(cfg.fingerprint()).part(source);
    for c in columns {
        fp = fp.part(c);
    }
    fp.finish()
}

/// Validates inputs and runs SGD on any design matrix.
pub fn fit_rows(
    rows: Rows<'_>,
    labels: &[bool],
    task: &str,
    cfg: &TrainConfig,
) -> Result<sgd::Fit, TrainError> {
    cfg.validate()?;
    if rows.n_rows() != labels.len() {
        return Err(TrainError::Shape(format!(
            "{} labels for {} rows",
            labels.len(),
            rows.n_rows()
        )));
    }
    let positives = labels.iter().filter(|&&y| y).count();
    if positives == 0 || positives == labels.len() {
        return Err(TrainError::SingleClass {
            task: task.to_string(),
            positives,
            n: labels.len(),
        });
    }
    if !rows.all_finite() {
        return Err(TrainError::NonFinite);
    }
    Ok(sgd::fit(rows, labels, cfg))
}

/// Labeled rows of `split` for `task`: the feature submatrix and labels.
pub fn task_rows(
    features: &FeatureMatrix,
    dataset: &Dataset,
    task: &str,
    split: Split,
) -> Result<(FeatureMatrix, Vec<bool>), TrainError> {
    if dataset.task(task).is_none() {
        return Err(TrainError::UnknownTask(task.to_string()));
    }
    let labeled = dataset.labeled(task, split);
    let ids: Vec<String> = labeled.iter().map(|(d, _)| d.doc_id.clone()).collect();
    let labels = labeled.iter().map(|&(_, y)| y).collect();
    let rows = features
        .select_rows(&ids)
        .map_err(|e| TrainError::Shape(e.to_string()))?;
    Ok((rows, labels))
}

/// Trains on the labeled train-split documents of `task`.
pub fn train_task(
    features: &FeatureMatrix,
    dataset: &Dataset,
    task: &str,
    cfg: &TrainConfig,
) -> Result<LinearModel, TrainError> {
    let (rows, labels) = task_rows(features, dataset, task, Split::Train)?;
    train(&rows, &labels, task, cfg)
}

/// `σ(w·f + b)` for every row of `features`.
pub fn predict_proba(model: &LinearModel, features: &FeatureMatrix) -> Result<Vec<f64>, TrainError> {
    Ok(predict_logits(model, features)?.into_iter().map(sigmoid).collect())
}

pub fn predict_logits(model: &LinearModel, features: &FeatureMatrix) -> Result<Vec<f64>, TrainError> {
    let cols = model.align(features.query_ids())?;
    Ok((0..features.n_rows())
        .map(|i| model.logit(&cols, features.row(i)))
        .collect())
}

/// Probability for one row given as `(column ids, values)`.
pub fn predict_row(model: &LinearModel, query_ids: &[String], values: &[f64]) -> Result<f64, TrainError> {
    let cols = model.align(query_ids)?;
    Ok(sigmoid(model.logit(&cols, values)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contribution {
    pub query_id: String,
    pub feature_value: f64,
    /// `weight * feature_value`.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    /// Sorted by score descending, ties by query id.
    pub contributions: Vec<Contribution>,
    pub intercept: f64,
    pub logit: f64,
    pub predicted_probability: f64,
}

pub fn explain(model: &LinearModel, query_ids: &[String], values: &[f64]) -> Result<Explanation, TrainError> {
    if values.len() != query_ids.len() {
        return Err(TrainError::Shape("row length differs from column count".into()));
    }
    let cols = model.align(query_ids)?;
    let mut contributions: Vec<Contribution> = model
        .query_ids
        .iter()
        .zip(&model.weights)
        .zip(&cols)
        .map(|((q, &w), &j)| Contribution {
            query_id: q.clone(),
            feature_value: values[j],
            score: w * values[j],
        })
        .collect();
    let logit = model.logit(&cols, values);
    contributions.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.query_id.cmp(&b.query_id)));
    Ok(Explanation {
        contributions,
        intercept: model.intercept,
        logit,
        predicted_probability: sigmoid(logit),
    })
}

/// Explanation for one document of `features`.
pub fn explain_doc(model: &LinearModel, features: &FeatureMatrix, doc_id: &str) -> Result<Explanation, TrainError> {
    let row = features
        .row_for(doc_id)
        .ok_or_else(|| TrainError::Shape(format!("no feature row for document {doc_id:?}")))?;
    explain(model, features.query_ids(), row)
}

/// Inputs for [`prune`] with retraining.
pub struct Retrain<'a> {
    pub features: &'a FeatureMatrix,
    pub labels: &'a [bool],
    pub cfg: &'a TrainConfig,
}

/// Without retraining, zeroes the dropped weights and leaves everything else
/// untouched; with retraining, fits a fresh model on the remaining columns.
pub fn prune(
    model: &LinearModel,
    drop: &BTreeSet<String>,
    retrain: Option<Retrain<'_>>,
) -> Result<LinearModel, TrainError> {
    if let Some(unknown) = drop.iter().find(|q| !model.query_ids.contains(q)) {
        return Err(TrainError::UnknownColumn(unknown.clone()));
    }
    match retrain {
        None => {
            if drop.is_empty() {
                return Ok(model.clone());
            }
            let mut pruned = model.clone();
            for (q, w) in pruned.query_ids.iter().zip(pruned.weights.iter_mut()) {
                if drop.contains(q) {
                    *w = 0.0;
                }
            }
            let mut fp = Fingerprint::new().part(&model.train_fingerprint).part("zeroed");
            for q in drop {
                fp = fp.part(q);
            }
            pruned.train_fingerprint = fp.finish();
            Ok(pruned)
        }
        Some(Retrain { features, labels, cfg }) => {
            let keep: Vec<String> = model
                .query_ids
                .iter()
                .filter(|q| !drop.contains(*q))
                .cloned()
                .collect();
            let sub = features
                .select_columns(&keep)
                .map_err(|e| TrainError::Shape(e.to_string()))?;
            train(&sub, labels, &model.task, cfg)
        }
    }
}

//! Metrics: AUROC, precision/recall/F1, coefficient-ranking alignment,
//! coefficient entropy, bootstrap intervals, and macro-averaging.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_RESAMPLES: usize = 1000;
pub const RANKING_KS: [usize; 4] = [1, 5, 10, 20];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("ill-defined: {0}")]
    IllDefined(String),
    #[error("length mismatch: {0} scores, {1} labels")]
    Length(usize, usize),
    #[error("scores contain NaN")]
    NaN,
    #[error("{ill_defined} of {resamples} bootstrap resamples were ill-defined")]
    Bootstrap { ill_defined: usize, resamples: usize },
    #[error("{0}")]
    Invalid(String),
}

/// Half-credit pair count `2 * #{pos > neg} + #{pos == neg}` and the pair count.
fn mann_whitney(scores: &[f64], labels: &[bool]) -> Result<(u64, u64), EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::Length(scores.len(), labels.len()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(EvalError::NaN);
    }
    let n_pos = labels.iter().filter(|&&y| y).count() as u64;
    let n_neg = labels.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::IllDefined(format!(
            "AUROC needs both classes ({n_pos} positives, {n_neg} negatives)"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut half_credits = 0u64;
    let mut neg_below = 0u64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u64, 0u64);
        // -0.0 and 0.0 compare equal.
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        half_credits += pos * (2 * neg_below + neg);
        neg_below += neg;
        i = j;
    }
    Ok((half_credits, n_pos * n_neg))
}

/// Probability that a random positive outranks a random negative, ties
/// counted one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    let (half, pairs) = mann_whitney(scores, labels)?;
    Ok(half as f64 / (2 * pairs) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision, recall, and F1 with degenerate cases scored 0.
pub fn classification_metrics(preds: &[bool], labels: &[bool]) -> Result<Classification, EvalError> {
    if preds.len() != labels.len() {
        return Err(EvalError::Length(preds.len(), labels.len()));
    }
    let tp = preds.iter().zip(labels).filter(|&(&p, &y)| p && y).count() as f64;
    let predicted = preds.iter().filter(|&&p| p).count() as f64;
    let actual = labels.iter().filter(|&&y| y).count() as f64;
    let precision = if predicted == 0.0 { 0.0 } else { tp / predicted };
    let recall = if actual == 0.0 { 0.0 } else { tp / actual };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(Classification { precision, recall, f1 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingAlignment {
    /// `(k, P@k)` pairs.
    pub precision_at: Vec<(usize, f64)>,
    /// Absent when every feature is relevant or none is.
    pub auc: Option<f64>,
}

/// Ranks features by coefficient (descending, ties by id) and scores the
/// ranking against `relevant`. When `k` exceeds the feature count the
/// whole list is the top-k.
pub fn ranking_alignment(
    coefficients: &[(String, f64)],
    relevant: &BTreeSet<String>,
    ks: &[usize],
) -> Result<RankingAlignment, EvalError> {
    if coefficients.is_empty() {
        return Err(EvalError::Invalid("no coefficients".into()));
    }
    if let Some(q) = relevant.iter().find(|q| !coefficients.iter().any(|(id, _)| id == *q)) {
        return Err(EvalError::Invalid(format!("relevant id {q:?} has no coefficient")));
    }
    if coefficients.iter().any(|(_, c)| c.is_nan()) {
        return Err(EvalError::NaN);
    }
    let mut ranked: Vec<&(String, f64)> = coefficients.iter().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut precision_at = Vec::with_capacity(ks.len());
    for &k in ks {
        if k == 0 {
            return Err(EvalError::Invalid("k must be positive".into()));
        }
        let top = k.min(ranked.len());
        let hits = ranked[..top].iter().filter(|(id, _)| relevant.contains(id)).count();
        precision_at.push((k, hits as f64 / top as f64));
    }
    let scores: Vec<f64> = coefficients.iter().map(|(_, c)| *c).collect();
    let labels: Vec<bool> = coefficients.iter().map(|(id, _)| relevant.contains(id)).collect();
    let auc = match auroc(&scores, &labels) {
        Ok(a) => Some(a),
        Err(EvalError::IllDefined(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(RankingAlignment { precision_at, auc })
}

/// `H(softmax(|w|))` in nats.
pub fn coefficient_entropy(weights: &[f64]) -> Result<f64, EvalError> {
    if weights.is_empty() {
        return Err(EvalError::Invalid("no weights".into()));
    }
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(EvalError::Invalid("non-finite weight".into()));
    }
    let max = weights.iter().map(|w| w.abs()).fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = weights.iter().map(|w| w.abs() - max).collect();
    let exps: Vec<f64> = shifted.iter().map(|s| s.exp()).collect();
    let z: f64 = exps.iter().sum();
    let mean_shift: f64 = exps.iter().zip(&shifted).map(|(e, s)| e * s).sum::<f64>() / z;
    Ok((z.ln() - mean_shift).max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub low: f64,
    pub high: f64,
    pub valid: usize,
    pub skipped: usize,
}

/// Linear-interpolated percentile of sorted data, `q` in `[0, 1]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Percentile bootstrap over `n` items. `statistic` returns `None` for
/// resamples where it is undefined; those are skipped and counted.
pub fn bootstrap_ci<F>(statistic: F, n: usize, resamples: usize, seed: u64) -> Result<Interval, EvalError>
where
    F: Fn(&[usize]) -> Option<f64>,
{
    if n == 0 || resamples == 0 {
        return Err(EvalError::Invalid("bootstrap needs n > 0 and resamples > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(resamples);
    let mut indices = vec![0usize; n];
    let mut skipped = 0;
    for _ in 0..resamples {
        for slot in indices.iter_mut() {
            *slot = rng.random_range(0..n);
        }
        match statistic(&indices) {
            Some(v) if !v.is_nan() => values.push(v),
            _ => skipped += 1,
        }
    }
    if 2 * skipped > resamples || values.is_empty() {
        return Err(EvalError::Bootstrap {
            ill_defined: skipped,
            resamples,
        });
    }
    values.sort_by(f64::total_cmp);
    Ok(Interval {
        low: percentile(&values, 0.025),
        high: percentile(&values, 0.975),
        valid: values.len(),
        skipped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    /// `None` when the metric is undefined (for example a single-class label).
    pub point_estimate: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_label: Vec<MetricReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl MetricReport {
    pub fn point(metric: &str, value: f64, n: usize) -> Self {
        MetricReport {
            metric: metric.to_string(),
            label: None,
            point_estimate: Some(value),
            ci_low: None,
            ci_high: None,
            n,
            per_label: Vec::new(),
            note: None,
        }
    }

    pub fn ill_defined(metric: &str, n: usize, note: impl Into<String>) -> Self {
        MetricReport {
            point_estimate: None,
            note: Some(note.into()),
            ..Self::point(metric, 0.0, n)
        }
    }

    pub fn with_label(mut self, label: &str) -> Self {
        self.label = Some(label.to_string());
        self
    }

    /// Attaches an interval, widened if needed so that it contains the
    /// point estimate.
    pub fn with_interval(mut self, interval: &Interval) -> Self {
        let p = self.point_estimate.unwrap_or(interval.low);
        self.ci_low = Some(interval.low.min(p));
        self.ci_high = Some(interval.high.max(p));
        self
    }

    pub fn is_defined(&self) -> bool {
        self.point_estimate.is_some()
    }
}

/// AUROC with a bootstrap interval over documents.
pub fn auroc_report(scores: &[f64], labels: &[bool], resamples: usize, seed: u64) -> MetricReport {
    let n = scores.len();
    let point = match auroc(scores, labels) {
        Ok(v) => v,
        Err(e) => return MetricReport::ill_defined("auroc", n, e.to_string()),
    };
    let report = MetricReport::point("auroc", point, n);
    if resamples == 0 {
        return report;
    }
    let stat = |idx: &[usize]| {
        let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
        let l: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
        auroc(&s, &l).ok()
    };
    match bootstrap_ci(stat, n, resamples, seed) {
        Ok(interval) => report.with_interval(&interval),
        Err(e) => MetricReport {
            note: Some(e.to_string()),
            ..report
        },
    }
}

/// Unweighted mean over the labels whose metric is defined. Undefined labels
/// stay in `per_label` and are counted in the note.
pub fn macro_average(metric: &str, reports: Vec<MetricReport>) -> Result<MetricReport, EvalError> {
    if reports.is_empty() {
        return Err(EvalError::Invalid("macro average of no labels".into()));
    }
    let defined: Vec<f64> = reports.iter().filter_map(|r| r.point_estimate).collect();
    let excluded = reports.len() - defined.len();
    let n = reports.iter().map(|r| r.n).max().unwrap_or(0);
    let mut out = if defined.is_empty() {
        MetricReport::ill_defined(metric, n, "no label has a defined value")
    } else {
        MetricReport::point(metric, defined.iter().sum::<f64>() / defined.len() as f64, n)
    };
    if excluded > 0 && !defined.is_empty() {
        out.note = Some(format!("{excluded} of {} labels excluded as ill-defined", reports.len()));
    }
    out.per_label = reports;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingRow {
    pub label: String,
    pub precision_at: Vec<(usize, f64)>,
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub rows: Vec<RankingRow>,
    /// Column means; the AUC mean skips labels without a defined AUC.
    pub average: RankingRow,
}

pub fn ranking_report(rows: Vec<RankingRow>) -> Result<RankingReport, EvalError> {
    let first = rows
        .first()
        .ok_or_else(|| EvalError::Invalid("ranking report needs at least one label".into()))?;
    let precision_at = first
        .precision_at
        .iter()
        .enumerate()
        .map(|(i, &(k, _))| {
            let mean = rows.iter().map(|r| r.precision_at[i].1).sum::<f64>() / rows.len() as f64;
            (k, mean)
        })
        .collect();
    let aucs: Vec<f64> = rows.iter().filter_map(|r| r.auc).collect();
    let auc = (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64);
    Ok(RankingReport {
        rows,
        average: RankingRow {
            label: "average".into(),
            precision_at,
            auc,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn pairwise_auroc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut credit = 0.0;
        let mut pairs = 0.0;
        for (i, &yi) in labels.iter().enumerate() {
            for (j, &yj) in labels.iter().enumerate() {
                if yi && !yj {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        credit += 1.0;
                    } else if scores[i] == scores[j] {
                        credit += 0.5;
                    }
                }
            }
        }
        credit / pairs
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.9, 0.8, 0.2], &[true, true, false]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.2, 0.8], &[true, false]).unwrap(), 0.0);
        assert_eq!(auroc(&[0.5; 4], &[true, false, true, false]).unwrap(), 0.5);
        assert!(matches!(auroc(&[0.1, 0.2], &[true, true]), Err(EvalError::IllDefined(_))));
        assert!(matches!(auroc(&[f64::NAN, 0.2], &[true, false]), Err(EvalError::NaN)));
    }

    #[test]
    fn classification_examples() {
        let m = classification_metrics(&[true, true, false], &[true, false, false]).unwrap();
        assert_eq!((m.precision, m.recall), (0.5, 1.0));
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-15);
        let none = classification_metrics(&[false; 3], &[true, false, false]).unwrap();
        assert_eq!((none.precision, none.f1), (0.0, 0.0));
        let same = classification_metrics(&[true, false, true], &[true, false, true]).unwrap();
        assert_eq!((same.precision, same.recall, same.f1), (1.0, 1.0, 1.0));
        let no_pos = classification_metrics(&[true, false], &[false, false]).unwrap();
        assert_eq!((no_pos.recall, no_pos.f1), (0.0, 0.0));
    }

    fn coefs(pairs: &[(&str, f64)]) -> Vec<(String, f64)> {
        pairs.iter().map(|(q, c)| (q.to_string(), *c)).collect()
    }

    fn set(ids: &[&str]) -> BTreeSet<String> {
        ids.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn ranking_examples() {
        let c = coefs(&[("q1", 3.0), ("q2", 2.0), ("q3", 1.0), ("q4", -1.0)]);
        let r = ranking_alignment(&c, &set(&["q1", "q3"]), &[1, 2]).unwrap();
        assert_eq!(r.precision_at, vec![(1, 1.0), (2, 0.5)]);
        assert_eq!(r.auc, Some(0.75));

        let all = ranking_alignment(&c, &set(&["q1", "q2", "q3", "q4"]), &RANKING_KS).unwrap();
        assert!(all.precision_at.iter().all(|&(_, p)| p == 1.0));
        assert_eq!(all.auc, None);

        let five = coefs(&[("a", 5.0), ("b", 4.0), ("c", 3.0), ("d", 2.0), ("e", 1.0)]);
        let last = ranking_alignment(&five, &set(&["e"]), &[1]).unwrap();
        assert_eq!(last.precision_at, vec![(1, 0.0)]);
        assert_eq!(last.auc, Some(0.0));

        let none = ranking_alignment(&five, &BTreeSet::new(), &[1, 5]).unwrap();
        assert_eq!(none.precision_at, vec![(1, 0.0), (5, 0.0)]);
        assert_eq!(none.auc, None);
    }

    #[test]
    fn ranking_ties_break_by_id() {
        let c = coefs(&[("b", 1.0), ("a", 1.0)]);
        let r = ranking_alignment(&c, &set(&["a"]), &[1]).unwrap();
        assert_eq!(r.precision_at, vec![(1, 1.0)]);
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(coefficient_entropy(&[1.0, -1.0, 1.0, 1.0]).unwrap(), 4f64.ln());
        // 50-digit mpmath: H(sigma(10), 1 - sigma(10)) = 0.000499377586241208591817...
        let h = coefficient_entropy(&[10.0, 0.0]).unwrap();
        assert!((h - 0.000_499_377_586_241_208_6).abs() < 1e-15, "{h}");
        assert_eq!(coefficient_entropy(&[5.0]).unwrap(), 0.0);
    }

    #[test]
    fn bootstrap_examples() {
        let c = bootstrap_ci(|_| Some(0.5), 20, 1000, 1).unwrap();
        assert_eq!((c.low, c.high), (0.5, 0.5));
        let stat = |idx: &[usize]| Some(idx.iter().sum::<usize>() as f64 / idx.len() as f64);
        assert_eq!(bootstrap_ci(stat, 30, 200, 7).unwrap(), bootstrap_ci(stat, 30, 200, 7).unwrap());
        let err = bootstrap_ci(|idx| (idx[0] % 3 == 0).then_some(1.0), 9, 300, 2).unwrap_err();
        assert!(matches!(err, EvalError::Bootstrap { .. }));
    }

    #[test]
    fn bootstrap_width_shrinks_with_n() {
        use rand_distr::{Distribution, Normal};
        let mut widths = Vec::new();
        for n in [60usize, 600] {
            let mut total = 0.0;
            for run in 0..5u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(run);
                let labels: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
                let scores: Vec<f64> = labels
                    .iter()
                    .map(|&y| Normal::new(if y { 1.0 } else { 0.0 }, 1.0).unwrap().sample(&mut rng))
                    .collect();
                let r = auroc_report(&scores, &labels, 300, run);
                total += r.ci_high.unwrap() - r.ci_low.unwrap();
            }
            widths.push(total / 5.0);
        }
        assert!(widths[1] < widths[0], "{widths:?}");
    }

    #[test]
    fn macro_examples() {
        let a = MetricReport::point("auroc", 0.8, 10).with_label("a");
        let b = MetricReport::point("auroc", 0.6, 10).with_label("b");
        let m = macro_average("auroc", vec![a.clone(), b]).unwrap();
        assert!((m.point_estimate.unwrap() - 0.7).abs() < 1e-15);
        assert_eq!(m.per_label.len(), 2);
        assert_eq!(macro_average("auroc", vec![a.clone()]).unwrap().point_estimate, Some(0.8));
        let c = MetricReport::ill_defined("auroc", 10, "single class").with_label("c");
        let m = macro_average("auroc", vec![a, c]).unwrap();
        assert_eq!(m.point_estimate, Some(0.8));
        assert_eq!(m.note.as_deref(), Some("1 of 2 labels excluded as ill-defined"));
        assert!(!m.per_label[1].is_defined());
    }

    fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
        (2usize..50).prop_flat_map(|n| {
            (
                proptest::collection::vec((0u8..6).prop_map(|v| v as f64 / 5.0), n),
                proptest::collection::vec(any::<bool>(), n),
            )
        })
        .prop_filter("both classes", |(_, l)| l.iter().any(|&y| y) && l.iter().any(|&y| !y))
    }

    proptest! {
        #[test]
        fn auroc_matches_pairwise((scores, labels) in instance()) {
            prop_assert_eq!(auroc(&scores, &labels).unwrap(), pairwise_auroc(&scores, &labels));
        }

        #[test]
        fn auroc_complement_sums_to_one((scores, labels) in instance()) {
            let flipped: Vec<bool> = labels.iter().map(|y| !y).collect();
            prop_assert_eq!(auroc(&scores, &labels).unwrap() + auroc(&scores, &flipped).unwrap(), 1.0);
        }

        #[test]
        fn auroc_invariant_under_monotone_transform((scores, labels) in instance()) {
            let t: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            prop_assert_eq!(auroc(&scores, &labels).unwrap(), auroc(&t, &labels).unwrap());
        }

        #[test]
        fn entropy_bounded(w in proptest::collection::vec(-20.0f64..20.0, 1..40)) {
            let h = coefficient_entropy(&w).unwrap();
            prop_assert!(h >= 0.0 && h <= (w.len() as f64).ln() + 1e-9);
        }

        #[test]
        fn entropy_max_iff_equal_magnitudes(m in 0.0f64..10.0, n in 1usize..30) {
            let w: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { m } else { -m }).collect();
            prop_assert!((coefficient_entropy(&w).unwrap() - (n as f64).ln()).abs() < 1e-9);
        }

        #[test]
        fn report_interval_contains_point((scores, labels) in instance(), seed in 0u64..100) {
            let r = auroc_report(&scores, &labels, 50, seed);
            if let (Some(lo), Some(hi), Some(p)) = (r.ci_low, r.ci_high, r.point_estimate) {
                prop_assert!(lo <= p && p <= hi);
            }
        }
    }
}

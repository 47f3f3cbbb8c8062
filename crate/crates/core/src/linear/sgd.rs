//! Stochastic gradient descent on the L2-regularized logistic loss.
//!
//! Objective over `M` samples with signed labels `s ∈ {-1, +1}`:
//! `(1/M) Σ log(1 + exp(-s (w·x + b))) + λ ‖w‖²`.
//! The step size follows the inverse-scaling "optimal" schedule
//! `η_t = 1 / (λ (t0 + t - 1))` with `t0` derived from `λ`, and the weight
//! vector is kept as `scale * v` so that the shrink step is O(1) per sample.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::TrainConfig;

/// Design matrix, dense row-major or sparse rows of `(column, value)`.
#[derive(Debug, Clone, Copy)]
pub enum Rows<'a> {
    Dense { values: &'a [f64], n_cols: usize },
    Sparse { rows: &'a [Vec<(usize, f64)>], n_cols: usize },
}

impl Rows<'_> {
    pub fn n_rows(&self) -> usize {
        match self {
            Rows::Dense { values, n_cols } => {
                if *n_cols == 0 {
                    0
                } else {
                    values.len() / n_cols
                }
            }
            Rows::Sparse { rows, .. } => rows.len(),
        }
    }

    pub fn n_cols(&self) -> usize {
        match self {
            Rows::Dense { n_cols, .. } | Rows::Sparse { n_cols, .. } => *n_cols,
        }
    }

    fn dot(&self, i: usize, w: &[f64]) -> f64 {
        match self {
            Rows::Dense { values, n_cols } => values[i * n_cols..(i + 1) * n_cols]
                .iter()
                .zip(w)
                .map(|(x, w)| x * w)
                .sum(),
            Rows::Sparse { rows, .. } => rows[i].iter().map(|&(j, x)| x * w[j]).sum(),
        }
    }

    fn axpy(&self, i: usize, a: f64, w: &mut [f64]) {
        match self {
            Rows::Dense { values, n_cols } => {
                for (w, x) in w.iter_mut().zip(&values[i * n_cols..(i + 1) * n_cols]) {
                    *w += a * x;
                }
            }
            Rows::Sparse { rows, .. } => {
                for &(j, x) in &rows[i] {
                    w[j] += a * x;
                }
            }
        }
    }

    pub(crate) fn all_finite(&self) -> bool {
        match self {
            Rows::Dense { values, .. } => values.iter().all(|v| v.is_finite()),
            Rows::Sparse { rows, n_cols } => rows
                .iter()
                .flatten()
                .all(|&(j, v)| j < *n_cols && v.is_finite()),
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// `log(1 + exp(-m))` for margin `m`, without overflow.
fn log_loss(margin: f64) -> f64 {
    if margin > 0.0 {
        (-margin).exp().ln_1p()
    } else {
        -margin + margin.exp().ln_1p()
    }
}

/// Derivative of `log(1 + exp(-s z))` with respect to `z`: `-s σ(-s z)`.
fn dloss(z: f64, signed: f64) -> f64 {
    -signed * sigmoid(-signed * z)
}

fn signed(label: bool) -> f64 {
    if label {
        1.0
    } else {
        -1.0
    }
}

/// Value and gradient of the regularized objective on a dense batch.
pub fn objective(
    weights: &[f64],
    intercept: f64,
    batch: &[&[f64]],
    labels: &[bool],
    l2: f64,
) -> (f64, Vec<f64>, f64) {
    let m = batch.len() as f64;
    let mut loss = 0.0;
    let mut grad_w = vec![0.0; weights.len()];
    let mut grad_b = 0.0;
    for (x, &y) in batch.iter().zip(labels) {
        let s = signed(y);
        let z = x.iter().zip(weights).map(|(x, w)| x * w).sum::<f64>() + intercept;
        loss += log_loss(s * z);
        let d = dloss(z, s);
        for (g, xi) in grad_w.iter_mut().zip(x.iter()) {
            *g += d * xi;
        }
        grad_b += d;
    }
    let norm2: f64 = weights.iter().map(|w| w * w).sum();
    for (g, w) in grad_w.iter_mut().zip(weights) {
        *g = *g / m + 2.0 * l2 * w;
    }
    (loss / m + l2 * norm2, grad_w, grad_b / m)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fit {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub epochs: usize,
    pub converged: bool,
}

/// Runs SGD. Inputs are assumed validated (finite, both classes present).
pub fn fit(rows: Rows<'_>, labels: &[bool], cfg: &TrainConfig) -> Fit {
    let n = rows.n_rows();
    let lambda = cfg.l2_strength;
    let mut v = vec![0.0; rows.n_cols()];
    let mut scale = 1.0;
    let mut intercept = 0.0;

    // Initial step from the typical weight magnitude 1/sqrt(sqrt(λ)); the
    // offset t0 makes the schedule start there.
    let (t0, fixed_eta) = if lambda > 0.0 {
        let typical = (1.0 / lambda.sqrt()).sqrt();
        let eta0 = typical / dloss(-typical, 1.0).abs().max(1.0);
        (1.0 / (eta0 * lambda), None)
    } else {
        (0.0, Some(0.01))
    };

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut t = 1.0f64;
    let mut best_loss = f64::INFINITY;
    let mut stale_epochs = 0;
    let mut epochs = 0;
    let mut converged = false;

    for _ in 0..cfg.epochs {
        epochs += 1;
        if cfg.shuffle_each_epoch {
            order.shuffle(&mut rng);
        }
        let mut epoch_loss = 0.0;
        for &i in &order {
            let eta = fixed_eta.unwrap_or_else(|| 1.0 / (lambda * (t0 + t - 1.0)));
            let s = signed(labels[i]);
            let z = scale * rows.dot(i, &v) + intercept;
            epoch_loss += log_loss(s * z);
            let step = -eta * dloss(z, s);
            // w <- (1 - 2ηλ) w + step * x
            scale *= (1.0 - 2.0 * eta * lambda).max(0.0);
            if scale < 1e-9 {
                v.iter_mut().for_each(|w| *w *= scale);
                scale = 1.0;
            }
            if scale == 0.0 {
                v.iter_mut().for_each(|w| *w = 0.0);
                scale = 1.0;
            }
            rows.axpy(i, step / scale, &mut v);
            if cfg.fit_intercept {
                intercept += step;
            }
            t += 1.0;
        }
        if epoch_loss > best_loss - cfg.tolerance * n as f64 {
            stale_epochs += 1;
        } else {
            stale_epochs = 0;
        }
        best_loss = best_loss.min(epoch_loss);
        if stale_epochs >= cfg.n_iter_no_change {
            converged = true;
            break;
        }
    }

    Fit {
        weights: v.into_iter().map(|w| w * scale).collect(),
        intercept,
        epochs,
        converged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn gradient_at_origin_is_half_minus_label_times_feature() {
        let x = [0.3, -1.2];
        for y in [false, true] {
            let (_, g, gb) = objective(&[0.0, 0.0], 0.0, &[&x], &[y], 0.0);
            let expected = 0.5 - y as u8 as f64;
            assert!((g[0] - expected * x[0]).abs() < 1e-15);
            assert!((g[1] - expected * x[1]).abs() < 1e-15);
            assert!((gb - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn log_loss_is_stable() {
        assert!((log_loss(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(log_loss(800.0) >= 0.0 && log_loss(800.0) < 1e-300);
        assert!((log_loss(-800.0) - 800.0).abs() < 1e-9);
    }

    #[test]
    fn matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-6;
        for _ in 0..50 {
            let d = rng.random_range(1..6);
            let m = rng.random_range(1..8);
            let w: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let b = rng.random_range(-1.0..1.0);
            let xs: Vec<Vec<f64>> = (0..m)
                .map(|_| (0..d).map(|_| rng.random_range(0.0..1.0)).collect())
                .collect();
            let ys: Vec<bool> = (0..m).map(|_| rng.random_bool(0.5)).collect();
            let batch: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
            let l2 = 0.01;
            let (_, g, gb) = objective(&w, b, &batch, &ys, l2);
            for j in 0..d {
                let mut plus = w.clone();
                plus[j] += h;
                let mut minus = w.clone();
                minus[j] -= h;
                let fd = (objective(&plus, b, &batch, &ys, l2).0
                    - objective(&minus, b, &batch, &ys, l2).0)
                    / (2.0 * h);
                let rel = (fd - g[j]).abs() / fd.abs().max(g[j].abs()).max(1e-8);
                assert!(rel < 1e-5, "rel {rel}");
            }
            let fd_b = (objective(&w, b + h, &batch, &ys, l2).0 - objective(&w, b - h, &batch, &ys, l2).0)
                / (2.0 * h);
            assert!((fd_b - gb).abs() / fd_b.abs().max(gb.abs()).max(1e-8) < 1e-5);
        }
    }

    #[test]
    fn dense_and_sparse_paths_agree() {
        let dense = vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0];
        let sparse = vec![vec![(0, 1.0)], vec![(1, 1.0)], vec![(0, 1.0), (1, 1.0)], vec![]];
        let labels = [true, false, true, false];
        let cfg = TrainConfig::default();
        let a = fit(Rows::Dense { values: &dense, n_cols: 2 }, &labels, &cfg);
        let b = fit(Rows::Sparse { rows: &sparse, n_cols: 2 }, &labels, &cfg);
        assert_eq!(a, b);
        assert!(a.weights[0] > 0.0 && a.weights[0] > a.weights[1]);
    }
}

//! L1-penalized logistic regression on novelty metrics, with nested
//! cross-validation and a single-feature threshold baseline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const LAMBDA_GRID: [f64; 4] = [0.01, 0.1, 1.0, 10.0];
pub const FOLDS: usize = 10;
const MAX_ITER: usize = 20_000;
const TOL: f64 = 1e-9;

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    v.signum() * (v.abs() - t).max(0.0)
}

/// Logistic model on z-scored features. The objective is the summed log-loss
/// plus `lambda · ‖w‖₁`; the bias is not penalized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Coefficients of the standardized features.
    pub weights: Vec<f64>,
    pub bias: f64,
    pub lambda: f64,
    pub iterations: usize,
}

impl LogisticModel {
    pub fn fit(x: &[Vec<f64>], y: &[bool], lambda: f64) -> Result<Self> {
        let n = x.len();
        if n == 0 || n != y.len() {
            return Err(Error::InvalidArgument(format!("{n} feature rows for {} labels", y.len())));
        }
        if !(lambda >= 0.0) {
            return Err(Error::InvalidArgument(format!("lambda must be non-negative, got {lambda}")));
        }
        let d = x[0].len();
        let mut mean = vec![0.0; d];
        for row in x {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n as f64;
            }
        }
        let mut std = vec![0.0; d];
        for row in x {
            for j in 0..d {
                std[j] += (row[j] - mean[j]).powi(2) / n as f64;
            }
        }
        for s in &mut std {
            *s = if *s > 0.0 { s.sqrt() } else { 1.0 };
        }
        let z: Vec<Vec<f64>> = x
            .iter()
            .map(|r| (0..d).map(|j| (r[j] - mean[j]) / std[j]).collect())
            .collect();
        let t: Vec<f64> = y.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();

        // Lipschitz constant of the summed log-loss: σ_max([Z 1])² / 4.
        let lip = 0.25 * top_singular_sq(&z) + 1e-12;
        let step = 1.0 / lip;

        let grad = |w: &[f64], b: f64| -> (Vec<f64>, f64) {
            let mut gw = vec![0.0; d];
            let mut gb = 0.0;
            for (row, &ti) in z.iter().zip(&t) {
                let r = sigmoid(b + row.iter().zip(w).map(|(a, c)| a * c).sum::<f64>()) - ti;
                gb += r;
                for (g, a) in gw.iter_mut().zip(row) {
                    *g += r * a;
                }
            }
            (gw, gb)
        };

        // FISTA.
        let (mut w, mut b) = (vec![0.0; d], 0.0);
        let (mut vw, mut vb) = (w.clone(), b);
        let mut momentum = 1.0f64;
        let mut iterations = 0;
        for it in 0..MAX_ITER {
            iterations = it + 1;
            let (gw, gb) = grad(&vw, vb);
            let nw: Vec<f64> = (0..d).map(|j| soft_threshold(vw[j] - step * gw[j], step * lambda)).collect();
            let nb = vb - step * gb;
            let next = 0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt());
            let beta = (momentum - 1.0) / next;
            let delta = nw
                .iter()
                .zip(&w)
                .map(|(a, c)| (a - c).abs())
                .fold((nb - b).abs(), f64::max);
            vw = (0..d).map(|j| nw[j] + beta * (nw[j] - w[j])).collect();
            vb = nb + beta * (nb - b);
            w = nw;
            b = nb;
            momentum = next;
            if delta < TOL {
                break;
            }
        }
        Ok(Self {
            mean,
            std,
            weights: w,
            bias: b,
            lambda,
            iterations,
        })
    }

    pub fn predict_proba(&self, row: &[f64]) -> f64 {
        let s: f64 = row
            .iter()
            .zip(&self.mean)
            .zip(&self.std)
            .zip(&self.weights)
            .map(|(((v, m), s), w)| (v - m) / s * w)
            .sum();
        sigmoid(self.bias + s)
    }

    pub fn predict(&self, row: &[f64]) -> bool {
        self.predict_proba(row) > 0.5
    }

    pub fn accuracy(&self, x: &[Vec<f64>], y: &[bool]) -> f64 {
        let hits = x.iter().zip(y).filter(|(r, &t)| self.predict(r) == t).count();
        hits as f64 / x.len() as f64
    }
}

fn top_singular_sq(z: &[Vec<f64>]) -> f64 {
    // Power iteration on [Z 1]ᵀ[Z 1].
    let d = z[0].len() + 1;
    let mut v = vec![1.0 / (d as f64).sqrt(); d];
    let mut est = 0.0;
    for _ in 0..100 {
        let mut u = vec![0.0; d];
        for row in z {
            let dot: f64 = row.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() + v[d - 1];
            for (ui, a) in u.iter_mut().zip(row) {
                *ui += dot * a;
            }
            u[d - 1] += dot;
        }
        let norm = u.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        let converged = (norm - est).abs() <= 1e-9 * norm;
        est = norm;
        v = u.into_iter().map(|a| a / norm).collect();
        if converged {
            break;
        }
    }
    // Power iteration converges from below; pad so the step stays safe.
    est * 1.01
}

/// Stratified fold index of every sample.
pub fn stratified_folds(y: &[bool], folds: usize, seed: u64) -> Vec<usize> {
    let mut rng = Rng::new(seed);
    let mut order: Vec<usize> = Vec::with_capacity(y.len());
    for class in [false, true] {
        let mut idx: Vec<usize> = (0..y.len()).filter(|&i| y[i] == class).collect();
        rng.shuffle(&mut idx);
        order.extend(idx);
    }
    let mut out = vec![0; y.len()];
    for (pos, &i) in order.iter().enumerate() {
        out[i] = pos % folds;
    }
    out
}

fn split<'a>(x: &'a [Vec<f64>], y: &[bool], folds: &[usize], f: usize) -> [(Vec<Vec<f64>>, Vec<bool>); 2] {
    let (mut tr, mut te) = ((Vec::new(), Vec::new()), (Vec::new(), Vec::new()));
    for i in 0..x.len() {
        let dst = if folds[i] == f { &mut te } else { &mut tr };
        dst.0.push(x[i].clone());
        dst.1.push(y[i]);
    }
    [tr, te]
}

/// Mean CV accuracy of each grid value on `(x, y)`.
fn cv_grid(x: &[Vec<f64>], y: &[bool], grid: &[f64], seed: u64) -> Result<Vec<f64>> {
    let k = FOLDS.min(x.len());
    let folds = stratified_folds(y, k, seed);
    let mut acc = vec![0.0; grid.len()];
    for f in 0..k {
        let [(xtr, ytr), (xte, yte)] = split(x, y, &folds, f);
        if xte.is_empty() {
            continue;
        }
        for (a, &lambda) in acc.iter_mut().zip(grid) {
            *a += LogisticModel::fit(&xtr, &ytr, lambda)?.accuracy(&xte, &yte) / k as f64;
        }
    }
    Ok(acc)
}

/// Grid value with the best CV accuracy; ties go to the stronger penalty.
fn select_lambda(x: &[Vec<f64>], y: &[bool], grid: &[f64], seed: u64) -> Result<f64> {
    let acc = cv_grid(x, y, grid, seed)?;
    let mut best = 0;
    for i in 1..grid.len() {
        if acc[i] > acc[best] + 1e-12 || ((acc[i] - acc[best]).abs() <= 1e-12 && grid[i] > grid[best]) {
            best = i;
        }
    }
    Ok(grid[best])
}

/// Best threshold rule `x ≥ t` or `x < t` on one feature; returns
/// `(threshold, above_is_positive)`.
pub fn fit_threshold(values: &[f64], y: &[bool]) -> (f64, bool) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let pos_total = y.iter().filter(|&&b| b).count();
    let neg_total = y.len() - pos_total;
    // Threshold below everything: all predicted "above".
    let mut best = (f64::NEG_INFINITY, true, pos_total.max(neg_total));
    if neg_total > pos_total {
        best.1 = false;
    }
    let (mut pos_below, mut neg_below) = (0, 0);
    for (rank, &i) in order.iter().enumerate() {
        if y[i] {
            pos_below += 1;
        } else {
            neg_below += 1;
        }
        let next = order.get(rank + 1).map(|&j| values[j]);
        if next == Some(values[i]) {
            continue;
        }
        let t = match next {
            Some(v) => 0.5 * (values[i] + v),
            None => f64::INFINITY,
        };
        let above_pos = neg_below + (pos_total - pos_below);
        let above_neg = pos_below + (neg_total - neg_below);
        for (hits, dir) in [(above_pos, true), (above_neg, false)] {
            if hits > best.2 {
                best = (t, dir, hits);
            }
        }
    }
    (best.0, best.1)
}

fn threshold_accuracy(t: f64, above_pos: bool, values: &[f64], y: &[bool]) -> f64 {
    let hits = values.iter().zip(y).filter(|(&v, &l)| ((v >= t) == above_pos) == l).count();
    hits as f64 / values.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CreativityReport {
    pub feature_names: Vec<String>,
    pub n: usize,
    pub positives: usize,
    pub majority_rate: f64,
    pub fold_accuracies: Vec<f64>,
    pub fold_lambdas: Vec<f64>,
    pub mean_accuracy: f64,
    /// Model refit on all samples with a CV-selected penalty.
    pub model: LogisticModel,
    /// CV accuracy of the best threshold rule on each single feature.
    pub single_feature_accuracies: Vec<f64>,
    pub best_single_feature: String,
    pub best_single_accuracy: f64,
}

/// Nested cross-validated L1 logistic regression of `labels` (creative or
/// not) on metric `features` (rows are samples).
pub fn train_creativity_classifier(
    features: &[Vec<f64>],
    feature_names: &[String],
    labels: &[bool],
    grid: &[f64],
    seed: u64,
) -> Result<CreativityReport> {
    let n = features.len();
    if n != labels.len() || n == 0 {
        return Err(Error::InvalidArgument(format!("{n} feature rows for {} labels", labels.len())));
    }
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty penalty grid".into()));
    }
    let d = feature_names.len();
    if d == 0 || features.iter().any(|r| r.len() != d) {
        return Err(Error::InvalidArgument(format!("every feature row must have {d} values")));
    }
    if features.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("features must be finite".into()));
    }
    let positives = labels.iter().filter(|&&b| b).count();
    if positives < 2 || n - positives < 2 {
        return Err(Error::Evaluation(format!(
            "need at least two samples of each class, got {positives} creative of {n}"
        )));
    }
    let k = FOLDS.min(n);
    let folds = stratified_folds(labels, k, seed);
    let mut fold_accuracies = Vec::with_capacity(k);
    let mut fold_lambdas = Vec::with_capacity(k);
    let mut single = vec![0.0; d];
    for f in 0..k {
        let [(xtr, ytr), (xte, yte)] = split(features, labels, &folds, f);
        let lambda = select_lambda(&xtr, &ytr, grid, seed.wrapping_add(1 + f as u64))?;
        let model = LogisticModel::fit(&xtr, &ytr, lambda)?;
        fold_accuracies.push(model.accuracy(&xte, &yte));
        fold_lambdas.push(lambda);
        for (j, s) in single.iter_mut().enumerate() {
            let col: Vec<f64> = xtr.iter().map(|r| r[j]).collect();
            let (t, dir) = fit_threshold(&col, &ytr);
            let test_col: Vec<f64> = xte.iter().map(|r| r[j]).collect();
            *s += threshold_accuracy(t, dir, &test_col, &yte) / k as f64;
        }
    }
    let mean_accuracy = fold_accuracies.iter().sum::<f64>() / k as f64;
    let lambda = select_lambda(features, labels, grid, seed)?;
    let model = LogisticModel::fit(features, labels, lambda)?;
    let best = (0..d).fold(0, |b, j| if single[j] > single[b] { j } else { b });
    Ok(CreativityReport {
        feature_names: feature_names.to_vec(),
        n,
        positives,
        majority_rate: positives.max(n - positives) as f64 / n as f64,
        fold_accuracies,
        fold_lambdas,
        mean_accuracy,
        model,
        best_single_feature: feature_names[best].clone(),
        best_single_accuracy: single[best],
        single_feature_accuracies: single,
    })
}

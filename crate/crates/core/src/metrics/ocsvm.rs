//! ν-one-class SVM with an RBF kernel, solved on the dual
//!
//! ```text
//! min ½ αᵀKα   s.t.  0 ≤ α_i ≤ 1/(νn),  Σ α_i = 1
//! ```
//!
//! by pairwise coordinate ascent with maximal-violating-pair selection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const DEFAULT_GAMMA: f64 = 0.1;
pub const DEFAULT_NU: f64 = 0.15;
pub const KKT_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OneClassSvm {
    pub gamma: f64,
    pub nu: f64,
    /// Number of training points the dual was solved on.
    pub n_train: usize,
    /// `[s × d]` support vectors.
    pub support: Vec<Vec<f32>>,
    pub coef: Vec<f64>,
    pub rho: f64,
    pub iterations: usize,
}

fn rbf(a: &[f32], b: &[f32], gamma: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum();
    (-gamma * d2).exp()
}

impl OneClassSvm {
    pub fn train(x: &Tensor, gamma: f64, nu: f64) -> Result<Self> {
        let n = x.rows();
        if n == 0 {
            return Err(Error::InvalidArgument("one-class SVM needs training points".into()));
        }
        if !(nu > 0.0 && nu <= 1.0) || !(gamma > 0.0) {
            return Err(Error::InvalidArgument(format!("invalid nu {nu} or gamma {gamma}")));
        }
        let mut k = vec![0f64; n * n];
        for i in 0..n {
            k[i * n + i] = 1.0;
            for j in 0..i {
                let v = rbf(x.row(i), x.row(j), gamma);
                k[i * n + j] = v;
                k[j * n + i] = v;
            }
        }
        let c = 1.0 / (nu * n as f64);
        // Feasible start: fill the first ⌊νn⌋ coefficients to the bound.
        let mut alpha = vec![0f64; n];
        let mut left = 1.0f64;
        for a in alpha.iter_mut() {
            let v = c.min(left);
            *a = v;
            left -= v;
            if left <= 0.0 {
                break;
            }
        }
        let mut grad = vec![0f64; n];
        for i in 0..n {
            if alpha[i] > 0.0 {
                for j in 0..n {
                    grad[j] += alpha[i] * k[i * n + j];
                }
            }
        }
        let max_iter = 10_000_000usize.max(100 * n);
        let mut iterations = 0;
        loop {
            // i may increase (α_i < C), j may decrease (α_j > 0).
            let mut up = None;
            let mut down = None;
            let (mut gmin, mut gmax) = (f64::INFINITY, f64::NEG_INFINITY);
            for t in 0..n {
                if alpha[t] < c && grad[t] < gmin {
                    gmin = grad[t];
                    up = Some(t);
                }
                if alpha[t] > 0.0 && grad[t] > gmax {
                    gmax = grad[t];
                    down = Some(t);
                }
            }
            let (Some(i), Some(j)) = (up, down) else { break };
            if gmax - gmin < KKT_TOL {
                break;
            }
            if iterations >= max_iter {
                return Err(Error::Solver(format!(
                    "one-class SVM did not reach KKT tolerance in {max_iter} iterations"
                )));
            }
            iterations += 1;
            let curv = (k[i * n + i] + k[j * n + j] - 2.0 * k[i * n + j]).max(1e-12);
            let step = ((gmax - gmin) / curv).min(c - alpha[i]).min(alpha[j]);
            alpha[i] += step;
            alpha[j] -= step;
            if alpha[j] < 1e-300 {
                alpha[j] = 0.0;
            }
            for t in 0..n {
                grad[t] += step * (k[i * n + t] - k[j * n + t]);
            }
        }
        let free: Vec<usize> = (0..n).filter(|&t| alpha[t] > 0.0 && alpha[t] < c * (1.0 - 1e-12)).collect();
        let rho = if free.is_empty() {
            let lo = (0..n).filter(|&t| alpha[t] < c).map(|t| grad[t]).fold(f64::INFINITY, f64::min);
            let hi = (0..n).filter(|&t| alpha[t] > 0.0).map(|t| grad[t]).fold(f64::NEG_INFINITY, f64::max);
            0.5 * (lo + hi)
        } else {
            free.iter().map(|&t| grad[t]).sum::<f64>() / free.len() as f64
        };
        let sv: Vec<usize> = (0..n).filter(|&t| alpha[t] > 0.0).collect();
        Ok(Self {
            gamma,
            nu,
            n_train: n,
            support: sv.iter().map(|&t| x.row(t).to_vec()).collect(),
            coef: sv.iter().map(|&t| alpha[t]).collect(),
            rho,
            iterations,
        })
    }

    /// Train on at most `max_points` rows drawn without replacement.
    pub fn train_subsample(x: &Tensor, gamma: f64, nu: f64, max_points: usize, seed: u64) -> Result<Self> {
        if x.rows() <= max_points {
            return Self::train(x, gamma, nu);
        }
        let mut idx = Rng::new(seed).sample_indices(x.rows(), max_points);
        idx.sort_unstable();
        Self::train(&x.select_rows(&idx), gamma, nu)
    }

    /// Signed decision value `Σ α_i K(sv_i, z) − ρ`; negative means outlier.
    pub fn decision(&self, z: &[f32]) -> f64 {
        self.support
            .iter()
            .zip(&self.coef)
            .map(|(sv, a)| a * rbf(sv, z, self.gamma))
            .sum::<f64>()
            - self.rho
    }

    pub fn decision_rows(&self, z: &Tensor) -> Vec<f64> {
        (0..z.rows()).map(|r| self.decision(z.row(r))).collect()
    }

    /// Decision value on the scale of libsvm's formulation (`α` summing to `νn`).
    pub fn libsvm_scale(&self) -> f64 {
        self.nu * self.n_train as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob(n: usize, seed: u64) -> Tensor {
        let mut rng = Rng::new(seed);
        Tensor::matrix(n, 2, (0..2 * n).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn coefficients_are_feasible() {
        let x = blob(200, 0);
        let svm = OneClassSvm::train(&x, 0.1, 0.15).unwrap();
        let c = 1.0 / (0.15 * 200.0);
        let sum: f64 = svm.coef.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        assert!(svm.coef.iter().all(|&a| a > 0.0 && a <= c * (1.0 + 1e-12)));
    }

    #[test]
    fn nu_bounds_the_outlier_fraction() {
        let x = blob(400, 1);
        let svm = OneClassSvm::train(&x, 0.1, 0.15).unwrap();
        let out = svm.decision_rows(&x).iter().filter(|&&d| d < 0.0).count() as f64 / 400.0;
        assert!((0.10..=0.20).contains(&out), "{out}");
    }

    #[test]
    fn far_query_scores_lowest() {
        let x = blob(150, 2);
        let svm = OneClassSvm::train(&x, 0.1, 0.15).unwrap();
        let far = svm.decision(&[100.0, 100.0]);
        assert!(svm.decision_rows(&x).iter().all(|&d| d > far));
    }
}

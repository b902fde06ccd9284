//! Classifier-entropy (ICE) and Inception-style scores.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MIN_INCEPTION_SAMPLES: usize = 100;

/// Shannon entropy in bits of `p` renormalized to sum 1; `0 log 0 = 0`.
pub fn entropy_bits(p: &[f32]) -> f64 {
    let total: f64 = p.iter().map(|&v| v as f64).sum();
    if !(total > 0.0) {
        return 0.0;
    }
    p.iter()
        .map(|&v| v as f64 / total)
        .filter(|&v| v > 0.0)
        .map(|v| -v * v.log2())
        .sum::<f64>()
        .max(0.0)
}

/// ICE for each row of a probability matrix.
pub fn ice(proba: &Tensor) -> Vec<f64> {
    (0..proba.rows()).map(|r| entropy_bits(proba.row(r))).collect()
}

/// `exp(mean_x KL(p(y|x) || p(y)))` with `p(y)` the batch marginal.
pub fn inception_style_score(proba: &Tensor) -> Result<f64> {
    let n = proba.rows();
    if n < MIN_INCEPTION_SAMPLES {
        return Err(Error::InvalidArgument(format!(
            "inception-style score needs at least {MIN_INCEPTION_SAMPLES} samples, got {n}"
        )));
    }
    let c = proba.cols();
    let mut marginal = vec![0f64; c];
    for r in 0..n {
        for (m, &p) in marginal.iter_mut().zip(proba.row(r)) {
            *m += p as f64;
        }
    }
    marginal.iter_mut().for_each(|m| *m /= n as f64);
    let mut kl = 0f64;
    for r in 0..n {
        for (&p, &m) in proba.row(r).iter().zip(&marginal) {
            let p = p as f64;
            if p > 0.0 {
                kl += p * (p / m).ln();
            }
        }
    }
    Ok((kl / n as f64).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints() {
        let mut one_hot = vec![0.0f32; 10];
        one_hot[4] = 1.0;
        assert_eq!(entropy_bits(&one_hot), 0.0);
        assert!((entropy_bits(&[0.1; 10]) - 10f64.log2()).abs() < 1e-12);
    }

    #[test]
    fn permutation_invariant() {
        let p = [0.5f32, 0.3, 0.2];
        assert_eq!(entropy_bits(&p), entropy_bits(&[0.2, 0.5, 0.3]));
    }

    #[test]
    fn inception_extremes() {
        let n = 200;
        let mut same = vec![0f32; n * 10];
        let mut spread = vec![0f32; n * 10];
        for r in 0..n {
            same[r * 10 + 3] = 1.0;
            spread[r * 10 + r % 10] = 1.0;
        }
        let same = inception_style_score(&Tensor::matrix(n, 10, same).unwrap()).unwrap();
        assert!((same - 1.0).abs() < 1e-12);
        let spread = inception_style_score(&Tensor::matrix(n, 10, spread).unwrap()).unwrap();
        assert!((spread - 10.0).abs() < 1e-9);
        assert!(inception_style_score(&Tensor::filled(&[99, 10], 0.1)).is_err());
    }
}

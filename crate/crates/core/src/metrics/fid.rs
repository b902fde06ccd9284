//! Fréchet distance between Gaussians fitted to two embedding batches.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const RIDGE: f64 = 1e-6;

/// Mean and unbiased covariance of the rows of `x`.
pub fn gaussian_fit(x: &Tensor) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (n, d) = (x.rows(), x.cols());
    if n < 2 {
        return Err(Error::InvalidArgument("need at least 2 samples to fit a covariance".into()));
    }
    let m = DMatrix::<f64>::from_row_iterator(n, d, x.data().iter().map(|&v| v as f64));
    let mean = DVector::<f64>::from_iterator(d, (0..d).map(|j| m.column(j).mean()));
    let mut centered = m;
    for j in 0..d {
        let mu = mean[j];
        centered.column_mut(j).iter_mut().for_each(|v| *v -= mu);
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    Ok((mean, cov))
}

fn sym_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// `||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2})` from moments.
pub fn frechet_distance(mu1: &DVector<f64>, s1: &DMatrix<f64>, mu2: &DVector<f64>, s2: &DMatrix<f64>) -> Result<f64> {
    let d = mu1.len();
    if mu2.len() != d || s1.shape() != (d, d) || s2.shape() != (d, d) {
        return Err(Error::Shape("Gaussian moments disagree in dimension".into()));
    }
    let ridge = DMatrix::<f64>::identity(d, d) * RIDGE;
    let s1 = s1 + &ridge;
    let s2 = s2 + &ridge;
    let r1 = sym_sqrt(&s1);
    let inner = &r1 * &s2 * &r1;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let diff = mu1 - mu2;
    let value = diff.dot(&diff) + s1.trace() + s2.trace() - 2.0 * tr_sqrt;
    if !value.is_finite() {
        return Err(Error::NonFinite("Fréchet distance".into()));
    }
    Ok(value.max(0.0))
}

pub fn fid(real: &Tensor, generated: &Tensor) -> Result<f64> {
    if real.cols() != generated.cols() {
        return Err(Error::Shape(format!("embedding widths {} vs {}", real.cols(), generated.cols())));
    }
    let (m1, s1) = gaussian_fit(real)?;
    let (m2, s2) = gaussian_fit(generated)?;
    frechet_distance(&m1, &s1, &m2, &s2)
}

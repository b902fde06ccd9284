//! Pearson chi-squared and likelihood-ratio G tests on two-row contingency
//! tables, with p-values from the regularized incomplete gamma function.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const EPS: f64 = 1e-15;
const MAX_ITER: usize = 10_000;

/// `ln Γ(x)` for `x > 0` (Lanczos, g = 7, n = 9).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + G + 0.5;
    for (i, &c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Lower regularized gamma `P(a, x)` by its power series (use for `x < a + 1`).
fn gamma_p_series(a: f64, x: f64) -> f64 {
    let mut sum = 1.0 / a;
    let mut term = sum;
    let mut ap = a;
    for _ in 0..MAX_ITER {
        ap += 1.0;
        term *= x / ap;
        sum += term;
        if term.abs() < sum.abs() * EPS {
            break;
        }
    }
    sum * (-x + a * x.ln() - ln_gamma(a)).exp()
}

/// Upper regularized gamma `Q(a, x)` by its continued fraction (modified
/// Lentz; use for `x ≥ a + 1`).
fn gamma_q_cf(a: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..MAX_ITER {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + an / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    (-x + a * x.ln() - ln_gamma(a)).exp() * h
}

/// Upper regularized incomplete gamma `Q(a, x) = Γ(a, x) / Γ(a)`.
pub fn gamma_q(a: f64, x: f64) -> f64 {
    assert!(a > 0.0, "gamma_q needs a > 0");
    if x <= 0.0 {
        1.0
    } else if x < a + 1.0 {
        1.0 - gamma_p_series(a, x)
    } else {
        gamma_q_cf(a, x)
    }
}

/// Survival function of the chi-squared distribution.
pub fn chi2_sf(x: f64, df: f64) -> f64 {
    gamma_q(df / 2.0, x / 2.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoricalTest {
    pub chi2: f64,
    pub chi2_p: f64,
    pub g: f64,
    pub g_p: f64,
    pub df: usize,
}

/// Compare two count vectors over the same categories.
pub fn categorical_tests(a: &[f64], b: &[f64]) -> Result<CategoricalTest> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need two count rows of equal length ≥ 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|&c| !(c >= 0.0) || !c.is_finite()) {
        return Err(Error::InvalidArgument("counts must be finite and non-negative".into()));
    }
    let (ra, rb): (f64, f64) = (a.iter().sum(), b.iter().sum());
    let total = ra + rb;
    let (mut chi2, mut g) = (0.0, 0.0);
    for j in 0..a.len() {
        let col = a[j] + b[j];
        for (obs, row) in [(a[j], ra), (b[j], rb)] {
            let e = row * col / total;
            if !(e > 0.0) {
                return Err(Error::Evaluation(format!("expected count in category {j} is zero")));
            }
            chi2 += (obs - e).powi(2) / e;
            if obs > 0.0 {
                g += obs * (obs / e).ln();
            }
        }
    }
    let g = 2.0 * g;
    let df = a.len() - 1;
    Ok(CategoricalTest {
        chi2,
        chi2_p: chi2_sf(chi2, df as f64),
        g,
        g_p: chi2_sf(g, df as f64),
        df,
    })
}

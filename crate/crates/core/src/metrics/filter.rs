//! Creativity filter: IQR outlier thresholds on distance metrics plus an
//! entropy window.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::intervention::percentile;

pub const IQR_FACTOR: f64 = 1.75;
pub const MIN_CALIBRATION: usize = 1000;

/// `Q2 + 1.75 (Q3 - Q1)` of `values`.
pub fn iqr_threshold(values: &[f32]) -> f64 {
    let q1 = percentile(values, 25.0) as f64;
    let q2 = percentile(values, 50.0) as f64;
    let q3 = percentile(values, 75.0) as f64;
    q2 + IQR_FACTOR * (q3 - q1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterThresholds {
    pub input_1nn: f64,
    pub latent_1nn: f64,
    pub regen_dist: f64,
    /// Mean classifier entropy of test images.
    pub ice_low: f64,
    /// Mean classifier entropy of uniform-noise images.
    pub ice_high: f64,
}

/// Metrics the filter looks at for one sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FilterInput {
    pub input_1nn: f64,
    pub latent_1nn: f64,
    pub regen_dist: f64,
    pub ice: f64,
}

impl FilterThresholds {
    /// Calibrate on metrics of regular generations.
    pub fn calibrate(regular: &[FilterInput], ice_low: f64, ice_high: f64) -> Result<Self> {
        if regular.len() < MIN_CALIBRATION {
            return Err(Error::InvalidArgument(format!(
                "filter calibration needs at least {MIN_CALIBRATION} regular generations, got {}",
                regular.len()
            )));
        }
        let col = |f: fn(&FilterInput) -> f64| -> Vec<f32> {
            regular.iter().map(f).filter(|v| v.is_finite()).map(|v| v as f32).collect()
        };
        let t = Self {
            input_1nn: iqr_threshold(&col(|r| r.input_1nn)),
            latent_1nn: iqr_threshold(&col(|r| r.latent_1nn)),
            regen_dist: iqr_threshold(&col(|r| r.regen_dist)),
            ice_low,
            ice_high,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.input_1nn, self.latent_1nn, self.regen_dist, self.ice_low, self.ice_high];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("filter thresholds must be finite".into()));
        }
        if self.ice_low >= self.ice_high {
            return Err(Error::InvalidArgument(format!(
                "entropy window [{}, {}] is empty",
                self.ice_low, self.ice_high
            )));
        }
        Ok(())
    }

    pub fn passes(&self, m: &FilterInput) -> bool {
        m.input_1nn > self.input_1nn
            && m.latent_1nn > self.latent_1nn
            && m.regen_dist > self.regen_dist
            && m.ice > self.ice_low
            && m.ice < self.ice_high
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_formula() {
        // Q1 = 1, Q2 = 2, Q3 = 3.
        let v = [0.0f32, 1.0, 2.0, 3.0, 4.0];
        assert_eq!(iqr_threshold(&v), 5.5);
    }

    fn regular(n: usize) -> Vec<FilterInput> {
        (0..n)
            .map(|i| {
                let v = i as f64 / n as f64;
                FilterInput { input_1nn: v, latent_1nn: v, regen_dist: v, ice: 0.5 }
            })
            .collect()
    }

    #[test]
    fn median_sample_fails_and_outlier_passes() {
        let t = FilterThresholds::calibrate(&regular(1001), 0.1, 2.0).unwrap();
        let median = FilterInput { input_1nn: 0.5, latent_1nn: 0.5, regen_dist: 0.5, ice: 0.5 };
        assert!(!t.passes(&median));
        let far = FilterInput { input_1nn: 5.0, latent_1nn: 5.0, regen_dist: 5.0, ice: 0.5 };
        assert!(t.passes(&far));
        assert!(!t.passes(&FilterInput { ice: 2.5, ..far }));
        assert!(!t.passes(&FilterInput { ice: 0.05, ..far }));
    }

    #[test]
    fn calibration_guards() {
        assert!(FilterThresholds::calibrate(&regular(10), 0.1, 2.0).is_err());
        assert!(FilterThresholds::calibrate(&regular(1000), 2.0, 1.0).is_err());
    }
}

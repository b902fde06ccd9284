//! Reconstruction distance `D_r = min_z ||x - decode(z)||_2`.

use crate::adam::{AdamConfig, AdamState};
use crate::error::{Error, Result};
use crate::nn::{GradAt, Mode, Network};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::vae::VaeModel;

pub const DEFAULT_STEPS: usize = 200;
pub const DEFAULT_LR: f32 = 0.05;
const BATCH: usize = 500;

/// Best distance found by Adam on `z` through a frozen `decoder`, starting
/// from `z0`. Rows are optimized independently.
pub fn optimize_latents(decoder: &Network, x: &Tensor, z0: &Tensor, steps: usize, lr: f32) -> Result<Vec<f32>> {
    if x.rows() != z0.rows() {
        return Err(Error::Shape(format!("{} images but {} initial latents", x.rows(), z0.rows())));
    }
    let n = x.rows();
    let mut z = z0.clone();
    let mut best = vec![f32::INFINITY; n];
    let mut adam = AdamState::new(AdamConfig {
        learning_rate: lr,
        ..AdamConfig::default()
    });
    let mut rng = Rng::new(0);
    for step in 0..=steps {
        let (out, cache) = decoder.forward(&z, Mode::Eval, &mut rng)?;
        let mut g = Tensor::zeros(out.shape());
        for r in 0..n {
            let d: f64 = out.row(r).iter().zip(x.row(r)).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>().sqrt();
            let d = d as f32;
            if !d.is_finite() {
                return Err(Error::NonFinite("reconstruction distance".into()));
            }
            if d < best[r] {
                best[r] = d;
            }
            if d > 0.0 {
                for ((gv, a), b) in g.row_mut(r).iter_mut().zip(out.row(r)).zip(x.row(r)) {
                    *gv = (a - b) / d;
                }
            }
        }
        if step == steps {
            break;
        }
        let dz = decoder.backward_input(&cache, &g, GradAt::Output)?;
        adam.step(&mut [&mut z], &[&dz])?;
    }
    Ok(best)
}

/// `D_r` for each image row, starting from the encoder mean.
pub fn reconstruction_distance(vae: &VaeModel, x: &Tensor, steps: usize, lr: f32) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(x.rows());
    let mut start = 0;
    while start < x.rows() {
        let end = (start + BATCH).min(x.rows());
        let xb = x.slice_rows(start, end);
        let (mu, _) = vae.encode(&xb)?;
        out.extend(optimize_latents(&vae.decoder, &xb, &mu, steps, lr)?);
        start = end;
    }
    Ok(out)
}

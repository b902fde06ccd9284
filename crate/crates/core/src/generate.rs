//! Batch sample generation with per-sample seeds.

use crate::atlas::Atlas;
use crate::data::quantize;
use crate::error::{Error, Result};
use crate::intervention::{decode_with_intervention, interpolation_latent, FlipRecord, Intervention, Method};
use crate::rng::Rng;
use crate::store::{GeneratedSample, SampleRecord};
use crate::tensor::Tensor;
use crate::vae::VaeModel;

/// Latents are redrawn this many times when a selection pool comes up empty.
pub const MAX_ATTEMPTS: u64 = 100;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Seed of sample `index`, attempt `attempt`, under run seed `base`.
pub fn sample_seed(base: u64, index: u64, attempt: u64) -> u64 {
    splitmix(splitmix(splitmix(base) ^ index) ^ attempt.wrapping_mul(0xd1b5_4a32_d192_ed03))
}

/// Training latents and labels used by the interpolation baseline.
pub struct InterpolationPool<'a> {
    pub latents: &'a Tensor,
    pub labels: &'a [u8],
}

pub struct Generator<'a> {
    pub vae: &'a VaeModel,
    pub atlas: Option<&'a Atlas>,
    pub pool: Option<InterpolationPool<'a>>,
}

impl Generator<'_> {
    /// Latent for a sample seed: `N(0, I)` from stream 0, or an interpolation.
    fn latent(&self, iv: &Intervention, seed: u64) -> Result<(Vec<f32>, Vec<usize>)> {
        let mut rng = Rng::new(seed).fork(0);
        if iv.method == Method::Interpolation {
            let pool = self
                .pool
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("interpolation needs training latents".into()))?;
            return interpolation_latent(pool.latents, pool.labels, iv.endpoints, iv.alpha, &mut rng);
        }
        Ok(((0..self.vae.z_dim).map(|_| rng.normal()).collect(), Vec::new()))
    }

    /// Decode a latent with an intervention whose `seed` is already set.
    pub fn decode(&self, z: &[f32], iv: &Intervention) -> Result<(Vec<f32>, FlipRecord)> {
        if iv.method.is_layer_method() && !iv.is_identity() {
            let atlas = self
                .atlas
                .ok_or_else(|| Error::InvalidArgument(format!("method {} needs an activation profile", iv.method)))?;
            decode_with_intervention(self.vae, z, iv, atlas)
        } else {
            let out = self.vae.decode(&Tensor::matrix(1, z.len(), z.to_vec())?)?;
            Ok((out.into_data(), FlipRecord::default()))
        }
    }

    /// Generate `n` samples named `{prefix}-{index:05}`.
    pub fn generate(&self, base: &Intervention, n: usize, seed: u64, prefix: &str) -> Result<Vec<GeneratedSample>> {
        base.validate()?;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let mut last_err = None;
            let mut made = None;
            for attempt in 0..MAX_ATTEMPTS {
                let iv = Intervention {
                    seed: sample_seed(seed, i as u64, attempt),
                    ..base.clone()
                };
                let (z, endpoints) = self.latent(&iv, iv.seed)?;
                match self.decode(&z, &iv) {
                    Ok((pixels, mut flips)) => {
                        flips.endpoints = endpoints;
                        made = Some((iv, z, pixels, flips));
                        break;
                    }
                    Err(Error::EmptyPool(m)) => last_err = Some(m),
                    Err(e) => return Err(e),
                }
            }
            let (iv, z, pixels, flips) = made.ok_or_else(|| {
                Error::EmptyPool(format!(
                    "sample {i}: no usable latent in {MAX_ATTEMPTS} draws ({})",
                    last_err.unwrap_or_default()
                ))
            })?;
            out.push(GeneratedSample {
                record: SampleRecord {
                    id: format!("{prefix}-{i:05}"),
                    intervention: iv,
                    z,
                    metrics: Default::default(),
                    flips,
                },
                image: pixels.iter().map(|&v| quantize(v)).collect(),
            });
        }
        Ok(out)
    }
}

/// Stack the images of `samples` into an `[N × 784]` tensor in `[0, 1]`.
pub fn sample_images(samples: &[GeneratedSample]) -> Result<Tensor> {
    let rows: Vec<Vec<f32>> = samples.iter().map(|s| s.pixels()).collect();
    if rows.is_empty() {
        return Ok(Tensor::zeros(&[0, crate::vae::IMAGE_DIM]));
    }
    Tensor::stack_rows(&rows)
}

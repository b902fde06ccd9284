//! Dense variational autoencoder with a Bernoulli pixel likelihood.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{sigmoid, Activation, GradAt, Gradients, Mode, Network};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const IMAGE_DIM: usize = 784;
pub const HIDDEN_WIDTHS: [usize; 3] = [1000, 500, 250];
pub const DROPOUT: f32 = 0.10;

#[derive(Clone, Debug, PartialEq)]
pub struct VaeModel {
    /// `784 → 1000 → 500 → 250 → 2·z_dim` (means then log-variances).
    pub encoder: Network,
    /// `z_dim → 250 → 500 → 1000 → 784`, sigmoid output.
    pub decoder: Network,
    pub z_dim: usize,
}

/// Batch-mean loss terms, per image.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ElboTerms {
    pub total: f64,
    pub nll: f64,
    pub kl: f64,
}

pub struct ElboOutput {
    pub terms: ElboTerms,
    pub encoder_grads: Gradients,
    pub decoder_grads: Gradients,
}

impl VaeModel {
    pub fn new(z_dim: usize, rng: &mut Rng) -> Result<Self> {
        Self::with_hidden(IMAGE_DIM, &HIDDEN_WIDTHS, z_dim, DROPOUT, rng)
    }

    /// Encoder `input → hidden… → 2·z_dim`, decoder the mirror image.
    pub fn with_hidden(input: usize, hidden: &[usize], z_dim: usize, dropout: f32, rng: &mut Rng) -> Result<Self> {
        if z_dim == 0 {
            return Err(Error::InvalidArgument("latent size must be positive".into()));
        }
        let mut enc = vec![input];
        enc.extend_from_slice(hidden);
        enc.push(2 * z_dim);
        let mut dec = vec![z_dim];
        dec.extend(hidden.iter().rev());
        dec.push(input);
        Ok(Self {
            encoder: Network::with_widths(&enc, Activation::Relu, Activation::Identity, dropout, rng)?,
            decoder: Network::with_widths(&dec, Activation::Relu, Activation::Sigmoid, dropout, rng)?,
            z_dim,
        })
    }

    pub fn from_networks(encoder: Network, decoder: Network) -> Result<Self> {
        let z_dim = decoder.input_width();
        if encoder.output_width() != 2 * z_dim || encoder.input_width() != decoder.output_width() {
            return Err(Error::Shape(format!(
                "encoder {:?} does not pair with decoder {:?}",
                encoder.widths(),
                decoder.widths()
            )));
        }
        Ok(Self { encoder, decoder, z_dim })
    }

    pub fn image_dim(&self) -> usize {
        self.encoder.input_width()
    }

    /// Number of hidden decoder layers (valid intervention layers are `1..=this`).
    pub fn decoder_hidden_layers(&self) -> usize {
        self.decoder.layers.len() - 1
    }

    /// Posterior means and log-variances, each `[N × z_dim]`.
    pub fn encode(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let out = self.encoder.eval(x)?;
        Ok(split_halves(&out, self.z_dim))
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        if z.cols() != self.z_dim {
            return Err(Error::Shape(format!("latent width {} vs {}", z.cols(), self.z_dim)));
        }
        self.decoder.eval(z)
    }

    /// `n` images decoded from `z ~ N(0, I)`; returns `(z, images)`.
    pub fn sample_prior(&self, n: usize, rng: &mut Rng) -> Result<(Tensor, Tensor)> {
        let z = Tensor::matrix(n, self.z_dim, (0..n * self.z_dim).map(|_| rng.normal()).collect())?;
        let x = self.decode(&z)?;
        Ok((z, x))
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.encoder.params_mut();
        p.extend(self.decoder.params_mut());
        p
    }

    /// ELBO loss on a batch: `nll_weight · NLL + KL`, with gradients.
    pub fn elbo_loss(&self, batch: &Tensor, nll_weight: f32, mode: Mode, rng: &mut Rng) -> Result<ElboOutput> {
        let n = batch.rows();
        if n == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let (enc_out, enc_cache) = self.encoder.forward(batch, mode, rng)?;
        let (mu, logvar) = split_halves(&enc_out, self.z_dim);
        let eps: Vec<f32> = (0..n * self.z_dim).map(|_| rng.normal()).collect();
        let z_data: Vec<f32> = mu
            .data()
            .iter()
            .zip(logvar.data())
            .zip(&eps)
            .map(|((&m, &lv), &e)| m + (0.5 * lv).exp() * e)
            .collect();
        let z = Tensor::matrix(n, self.z_dim, z_data)?;
        let (_, dec_cache) = self.decoder.forward(&z, mode, rng)?;
        let logits = dec_cache.pre.last().expect("decoder has layers");

        let nll = bernoulli_nll_from_logits(batch, logits);
        let kl = gaussian_kl(&mu, &logvar);
        let total = nll_weight as f64 * nll + kl;
        if !total.is_finite() {
            return Err(Error::NonFinite("ELBO loss".into()));
        }

        let inv_n = 1.0 / n as f32;
        let dlogits = Tensor::new(
            logits.shape().to_vec(),
            logits
                .data()
                .iter()
                .zip(batch.data())
                .map(|(&l, &x)| nll_weight * (sigmoid(l) - x) * inv_n)
                .collect(),
        )?;
        let decoder_grads = self.decoder.backward(&dec_cache, &dlogits, GradAt::PreActivation)?;
        let dz = &decoder_grads.input;
        let mut denc = Tensor::zeros(&[n, 2 * self.z_dim]);
        for r in 0..n {
            let (mu_r, lv_r, dz_r, eps_r) = (
                mu.row(r),
                logvar.row(r),
                dz.row(r),
                &eps[r * self.z_dim..(r + 1) * self.z_dim],
            );
            let out = denc.row_mut(r);
            for j in 0..self.z_dim {
                let std = (0.5 * lv_r[j]).exp();
                out[j] = dz_r[j] + mu_r[j] * inv_n;
                out[self.z_dim + j] = dz_r[j] * eps_r[j] * 0.5 * std + 0.5 * (lv_r[j].exp() - 1.0) * inv_n;
            }
        }
        let encoder_grads = self.encoder.backward(&enc_cache, &denc, GradAt::Output)?;
        Ok(ElboOutput {
            terms: ElboTerms { total, nll, kl },
            encoder_grads,
            decoder_grads,
        })
    }

    /// Loss terms only, over a whole dataset in batches (no dropout).
    pub fn evaluate(&self, images: &Tensor, nll_weight: f32, seed: u64) -> Result<ElboTerms> {
        let mut rng = Rng::new(seed);
        let n = images.rows();
        let mut acc = ElboTerms::default();
        let batch = 1000;
        let mut start = 0;
        while start < n {
            let end = (start + batch).min(n);
            let x = images.slice_rows(start, end);
            let (mu, logvar) = self.encode(&x)?;
            let z_data: Vec<f32> = mu
                .data()
                .iter()
                .zip(logvar.data())
                .map(|(&m, &lv)| m + (0.5 * lv).exp() * rng.normal())
                .collect();
            let z = Tensor::matrix(end - start, self.z_dim, z_data)?;
            let pre = self.decoder.eval_logits(&z)?;
            let w = (end - start) as f64;
            let nll = bernoulli_nll_from_logits(&x, &pre);
            let kl = gaussian_kl(&mu, &logvar);
            acc.nll += nll * w;
            acc.kl += kl * w;
            start = end;
        }
        acc.nll /= n as f64;
        acc.kl /= n as f64;
        acc.total = nll_weight as f64 * acc.nll + acc.kl;
        if !acc.total.is_finite() {
            return Err(Error::NonFinite("ELBO loss".into()));
        }
        Ok(acc)
    }
}

fn split_halves(t: &Tensor, half: usize) -> (Tensor, Tensor) {
    let n = t.rows();
    let mut a = Vec::with_capacity(n * half);
    let mut b = Vec::with_capacity(n * half);
    for r in 0..n {
        let row = t.row(r);
        a.extend_from_slice(&row[..half]);
        b.extend_from_slice(&row[half..]);
    }
    (
        Tensor::new(vec![n, half], a).expect("consistent"),
        Tensor::new(vec![n, half], b).expect("consistent"),
    )
}

/// Batch mean of `Σ_pixels BCE(x, σ(logit))`.
pub fn bernoulli_nll_from_logits(x: &Tensor, logits: &Tensor) -> f64 {
    let n = x.rows().max(1);
    let sum: f64 = x
        .data()
        .iter()
        .zip(logits.data())
        .map(|(&x, &l)| {
            let l = l as f64;
            // softplus(l) - x·l, stable for both signs
            let sp = if l > 0.0 { l + (-l).exp().ln_1p() } else { l.exp().ln_1p() };
            sp - x as f64 * l
        })
        .sum();
    sum / n as f64
}

/// Batch mean of the closed-form `KL(N(μ, σ²) ‖ N(0, I))`.
pub fn gaussian_kl(mu: &Tensor, logvar: &Tensor) -> f64 {
    let n = mu.rows().max(1);
    let sum: f64 = mu
        .data()
        .iter()
        .zip(logvar.data())
        .map(|(&m, &lv)| {
            let (m, lv) = (m as f64, lv as f64);
            0.5 * (m * m + lv.exp() - 1.0 - lv)
        })
        .sum();
    sum / n as f64
}

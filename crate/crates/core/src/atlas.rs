//! Activation statistics of the decoder's hidden layers over the training set.
//!
//! Layers are numbered from 1 (the first hidden layer after `z`).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::ClusterAssignment;
use crate::tensor::{dgemm, Tensor};
use crate::vae::VaeModel;

/// Activation threshold: a neuron is "on" when its output exceeds this.
pub const TAU: f32 = 1e-7;

const CHUNK: usize = 2048;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerProfile {
    pub layer: usize,
    pub tau: f32,
    pub samples: usize,
    /// Fraction of training inputs on which each neuron exceeds `tau`.
    pub percent: Vec<f32>,
    pub max: Vec<f32>,
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
    /// `[p × p]` Pearson correlation of raw activations; 0 for constant neurons.
    pub corr: Tensor,
    /// `[p × classes]` percent activation within each class.
    pub class_percent: Tensor,
    /// Entropy in bits of the class-normalized activation distribution.
    pub class_entropy: Vec<f32>,
    pub clusters: Option<ClusterAssignment>,
}

impl LayerProfile {
    pub fn width(&self) -> usize {
        self.percent.len()
    }

    pub fn num_classes(&self) -> usize {
        self.class_percent.cols()
    }

    pub fn is_dead(&self, j: usize) -> bool {
        self.percent[j] == 0.0
    }

    pub fn dead_count(&self) -> usize {
        self.percent.iter().filter(|&&a| a == 0.0).count()
    }

    pub fn alive(&self) -> Vec<usize> {
        (0..self.width()).filter(|&j| !self.is_dead(j)).collect()
    }

    pub fn corr_at(&self, j: usize, h: usize) -> f32 {
        self.corr.data()[j * self.width() + h]
    }

    pub fn has_variance(&self, j: usize) -> bool {
        self.std[j] > 0.0
    }
}

/// On set `A` and off-but-alive set `D` of one layer output.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OnOff {
    pub on: Vec<usize>,
    pub off: Vec<usize>,
}

pub fn off_on_sets(profile: &LayerProfile, output: &[f32]) -> OnOff {
    let mut on = Vec::new();
    let mut off = Vec::new();
    for (j, &v) in output.iter().enumerate() {
        if profile.is_dead(j) {
            continue;
        }
        if v > profile.tau {
            on.push(j);
        } else {
            off.push(j);
        }
    }
    OnOff { on, off }
}

/// Streaming accumulator for one layer.
struct Accumulator {
    p: usize,
    classes: usize,
    n: usize,
    count: Vec<u64>,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
    max: Vec<f32>,
    gram: Vec<f64>,
    class_count: Vec<u64>,
    class_n: Vec<u64>,
}

impl Accumulator {
    fn new(p: usize, classes: usize) -> Self {
        Self {
            p,
            classes,
            n: 0,
            count: vec![0; p],
            sum: vec![0.0; p],
            sum_sq: vec![0.0; p],
            max: vec![0.0; p],
            gram: vec![0.0; p * p],
            class_count: vec![0; p * classes],
            class_n: vec![0; classes],
        }
    }

    fn add(&mut self, acts: &Tensor, labels: &[u8], tau: f32) {
        let p = self.p;
        let rows = acts.rows();
        let mut wide = Vec::with_capacity(rows * p);
        for r in 0..rows {
            let row = acts.row(r);
            let c = labels[r] as usize;
            self.class_n[c] += 1;
            for (j, &v) in row.iter().enumerate() {
                if v > tau {
                    self.count[j] += 1;
                    self.class_count[j * self.classes + c] += 1;
                }
                let v64 = v as f64;
                self.sum[j] += v64;
                self.sum_sq[j] += v64 * v64;
                if v > self.max[j] {
                    self.max[j] = v;
                }
                wide.push(v64);
            }
        }
        dgemm(p, rows, p, &wide, true, &wide, false, &mut self.gram, 1.0);
        self.n += rows;
    }

    fn finish(self, layer: usize, tau: f32) -> LayerProfile {
        let (p, n) = (self.p, self.n as f64);
        let mean: Vec<f64> = self.sum.iter().map(|s| s / n).collect();
        let var: Vec<f64> = (0..p).map(|j| (self.sum_sq[j] / n - mean[j] * mean[j]).max(0.0)).collect();
        let std: Vec<f64> = var.iter().map(|v| v.sqrt()).collect();
        let mut corr = vec![0f32; p * p];
        for j in 0..p {
            if std[j] == 0.0 {
                continue;
            }
            for h in 0..p {
                if std[h] == 0.0 {
                    continue;
                }
                let cov = self.gram[j * p + h] / n - mean[j] * mean[h];
                corr[j * p + h] = if j == h { 1.0 } else { (cov / (std[j] * std[h])).clamp(-1.0, 1.0) as f32 };
            }
        }
        let percent: Vec<f32> = self.count.iter().map(|&c| (c as f64 / n) as f32).collect();
        let mut class_percent = vec![0f32; p * self.classes];
        for j in 0..p {
            for c in 0..self.classes {
                let nc = self.class_n[c];
                if nc > 0 {
                    class_percent[j * self.classes + c] = (self.class_count[j * self.classes + c] as f64 / nc as f64) as f32;
                }
            }
        }
        let class_percent = Tensor::matrix(p, self.classes, class_percent).expect("shape");
        let class_entropy = (0..p).map(|j| class_entropy(class_percent.row(j))).collect();
        LayerProfile {
            layer,
            tau,
            samples: self.n,
            percent,
            max: self.max,
            mean: mean.iter().map(|&m| m as f32).collect(),
            std: std.iter().map(|&s| s as f32).collect(),
            corr: Tensor::matrix(p, p, corr).expect("shape"),
            class_percent,
            class_entropy,
            clusters: None,
        }
    }
}

/// Entropy in bits of a non-negative vector after normalizing it to sum 1.
/// An all-zero vector has entropy 0.
pub fn class_entropy(weights: &[f32]) -> f32 {
    let total: f64 = weights.iter().map(|&w| w as f64).sum();
    if total <= 0.0 {
        return 0.0;
    }
    let h: f64 = weights
        .iter()
        .map(|&w| w as f64 / total)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.log2())
        .sum();
    h as f32
}

/// Profile a layer from precomputed activations `[n × p]`.
pub fn profile_activations(acts: &Tensor, labels: &[u8], classes: usize, layer: usize, tau: f32) -> Result<LayerProfile> {
    if acts.rows() == 0 {
        return Err(Error::InvalidArgument("cannot profile an empty dataset".into()));
    }
    if labels.len() != acts.rows() {
        return Err(Error::Shape(format!("{} activation rows, {} labels", acts.rows(), labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::InvalidArgument(format!("label {bad} outside {classes} classes")));
    }
    let mut acc = Accumulator::new(acts.cols(), classes);
    let mut start = 0;
    while start < acts.rows() {
        let end = (start + CHUNK).min(acts.rows());
        acc.add(&acts.slice_rows(start, end), &labels[start..end], tau);
        start = end;
    }
    Ok(acc.finish(layer, tau))
}

/// Run the decoder on `latents` and profile hidden layers `layers` (1-based).
pub fn profile_decoder(
    vae: &VaeModel,
    latents: &Tensor,
    labels: &[u8],
    classes: usize,
    layers: &[usize],
    tau: f32,
) -> Result<Vec<LayerProfile>> {
    let hidden = vae.decoder_hidden_layers();
    if latents.rows() == 0 {
        return Err(Error::InvalidArgument("cannot profile an empty dataset".into()));
    }
    if labels.len() != latents.rows() {
        return Err(Error::Shape(format!("{} latents, {} labels", latents.rows(), labels.len())));
    }
    if let Some(&k) = layers.iter().find(|&&k| k == 0 || k > hidden) {
        return Err(Error::InvalidArgument(format!("decoder has hidden layers 1..={hidden}, got {k}")));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::InvalidArgument(format!("label {bad} outside {classes} classes")));
    }
    let deepest = layers.iter().copied().max().unwrap_or(0);
    let mut accs: Vec<Accumulator> = layers
        .iter()
        .map(|&k| Accumulator::new(vae.decoder.layers[k - 1].outputs(), classes))
        .collect();
    let mut start = 0;
    while start < latents.rows() {
        let end = (start + CHUNK).min(latents.rows());
        let mut current = latents.slice_rows(start, end);
        for k in 1..=deepest {
            current = vae.decoder.eval_range(k - 1..k, &current)?;
            for (acc, _) in accs.iter_mut().zip(layers).filter(|(_, &l)| l == k) {
                acc.add(&current, &labels[start..end], tau);
            }
        }
        start = end;
    }
    Ok(accs.into_iter().zip(layers).map(|(acc, &k)| acc.finish(k, tau)).collect())
}

/// Per-layer statistics bundle persisted next to a VAE checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Atlas {
    pub layers: Vec<LayerProfile>,
}

impl Atlas {
    pub fn layer(&self, k: usize) -> Result<&LayerProfile> {
        self.layers
            .iter()
            .find(|l| l.layer == k)
            .ok_or_else(|| Error::InvalidArgument(format!("no profile for decoder layer {k}")))
    }

    /// Attach spectral clusters to every layer.
    pub fn cluster(&mut self, num_clusters: usize, seed: u64) -> Result<()> {
        for layer in &mut self.layers {
            layer.clusters = Some(ClusterAssignment::build(layer, num_clusters, seed)?);
        }
        Ok(())
    }

    pub fn summary(&self) -> AtlasSummary {
        AtlasSummary {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    let mut histogram = vec![0usize; 10];
                    for &a in &l.percent {
                        histogram[((a * 10.0) as usize).min(9)] += 1;
                    }
                    LayerSummary {
                        layer: l.layer,
                        width: l.width(),
                        dead: l.dead_count(),
                        samples: l.samples,
                        tau: l.tau,
                        percent_histogram: histogram,
                        cluster_sizes: l.clusters.as_ref().map(|c| c.sizes()),
                    }
                })
                .collect(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// Binary sidecar: `b"CDPR"`, u32 version, u32 + JSON header, then per
    /// layer the f32 arrays percent, max, mean, std, corr, class_percent,
    /// class_entropy and (if clustered) u32 cluster ids, all little-endian.
    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = ProfileHeader {
            layers: self
                .layers
                .iter()
                .map(|l| HeaderLayer {
                    layer: l.layer,
                    width: l.width(),
                    classes: l.num_classes(),
                    samples: l.samples,
                    tau: l.tau,
                    clusters: l.clusters.as_ref().map(|c| c.num_clusters),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(PROFILE_MAGIC);
        out.extend_from_slice(&PROFILE_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        let mut put = |vals: &[f32]| vals.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        for l in &self.layers {
            put(&l.percent);
            put(&l.max);
            put(&l.mean);
            put(&l.std);
            put(l.corr.data());
            put(l.class_percent.data());
            put(&l.class_entropy);
        }
        for l in &self.layers {
            if let Some(c) = &l.clusters {
                for id in &c.ids {
                    out.extend_from_slice(&id.map_or(u32::MAX, |v| v as u32).to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let end = pos.checked_add(n).filter(|&e| e <= bytes.len());
            let end = end.ok_or_else(|| Error::Checkpoint(format!("profile truncated at byte {pos}")))?;
            let s = &bytes[pos..end];
            pos = end;
            Ok(s)
        };
        if take(4)? != PROFILE_MAGIC {
            return Err(Error::Checkpoint("bad profile magic".into()));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
        if version != PROFILE_VERSION {
            return Err(Error::Checkpoint(format!("unsupported profile version {version}")));
        }
        let hlen = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        let header: ProfileHeader = serde_json::from_slice(take(hlen)?)?;
        let mut f32s = |n: usize| -> Result<Vec<f32>> {
            Ok(take(n * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
        };
        let mut layers = Vec::new();
        for h in &header.layers {
            let p = h.width;
            layers.push(LayerProfile {
                layer: h.layer,
                tau: h.tau,
                samples: h.samples,
                percent: f32s(p)?,
                max: f32s(p)?,
                mean: f32s(p)?,
                std: f32s(p)?,
                corr: Tensor::matrix(p, p, f32s(p * p)?)?,
                class_percent: Tensor::matrix(p, h.classes, f32s(p * h.classes)?)?,
                class_entropy: f32s(p)?,
                clusters: None,
            });
        }
        for (l, h) in layers.iter_mut().zip(&header.layers) {
            if let Some(k) = h.clusters {
                let raw = f32s(h.width)?;
                let ids: Vec<Option<usize>> = raw
                    .iter()
                    .map(|v| {
                        let bits = v.to_bits();
                        (bits != u32::MAX).then_some(bits as usize)
                    })
                    .collect();
                l.clusters = Some(ClusterAssignment::from_ids(ids, k, l)?);
            }
        }
        if pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing profile bytes", bytes.len() - pos)));
        }
        Ok(Atlas { layers })
    }
}

const PROFILE_MAGIC: &[u8; 4] = b"CDPR";
const PROFILE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ProfileHeader {
    layers: Vec<HeaderLayer>,
}

#[derive(Serialize, Deserialize)]
struct HeaderLayer {
    layer: usize,
    width: usize,
    classes: usize,
    samples: usize,
    tau: f32,
    clusters: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AtlasSummary {
    pub layers: Vec<LayerSummary>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerSummary {
    pub layer: usize,
    pub width: usize,
    pub dead: usize,
    pub samples: usize,
    pub tau: f32,
    /// Neuron counts per percent-activation decile.
    pub percent_histogram: Vec<usize>,
    pub cluster_sizes: Option<Vec<usize>>,
}

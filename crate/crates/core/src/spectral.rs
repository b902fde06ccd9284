//! Spectral clustering of neurons from their correlation matrix.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::atlas::LayerProfile;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

const KMEANS_RESTARTS: usize = 10;
const KMEANS_ITERS: usize = 300;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub num_clusters: usize,
    /// Cluster of each neuron of the layer; `None` for dead neurons.
    pub ids: Vec<Option<usize>>,
    /// `[clusters × classes]` mean per-class percent activation of members.
    pub class_percent: Tensor,
    /// Mean percent activation of each cluster over all training data.
    pub percent: Vec<f32>,
}

impl ClusterAssignment {
    pub fn from_ids(ids: Vec<Option<usize>>, num_clusters: usize, profile: &LayerProfile) -> Result<Self> {
        if ids.len() != profile.width() {
            return Err(Error::Shape(format!("{} cluster ids for {} neurons", ids.len(), profile.width())));
        }
        if ids.iter().flatten().any(|&c| c >= num_clusters) {
            return Err(Error::InvalidArgument("cluster id out of range".into()));
        }
        let classes = profile.num_classes();
        let mut class_sum = vec![0f64; num_clusters * classes];
        let mut sum = vec![0f64; num_clusters];
        let mut size = vec![0usize; num_clusters];
        for (j, id) in ids.iter().enumerate() {
            if let Some(c) = *id {
                size[c] += 1;
                sum[c] += profile.percent[j] as f64;
                for (k, &v) in profile.class_percent.row(j).iter().enumerate() {
                    class_sum[c * classes + k] += v as f64;
                }
            }
        }
        let class_percent = (0..num_clusters * classes)
            .map(|i| (class_sum[i] / size[i / classes].max(1) as f64) as f32)
            .collect();
        Ok(Self {
            num_clusters,
            class_percent: Tensor::matrix(num_clusters, classes, class_percent)?,
            percent: sum.iter().zip(&size).map(|(s, &n)| (s / n.max(1) as f64) as f32).collect(),
            ids,
        })
    }

    /// Cluster the alive neurons of `profile`.
    pub fn build(profile: &LayerProfile, num_clusters: usize, seed: u64) -> Result<Self> {
        let alive = profile.alive();
        if alive.len() < num_clusters {
            return Err(Error::InvalidArgument(format!(
                "{} alive neurons cannot form {num_clusters} clusters",
                alive.len()
            )));
        }
        let p = profile.width();
        let sub: Vec<f32> = alive
            .iter()
            .flat_map(|&j| alive.iter().map(move |&h| (j, h)))
            .map(|(j, h)| profile.corr.data()[j * p + h])
            .collect();
        let labels = spectral_cluster(&Tensor::matrix(alive.len(), alive.len(), sub)?, num_clusters, seed)?;
        let mut ids = vec![None; p];
        for (&j, &c) in alive.iter().zip(&labels) {
            ids[j] = Some(c);
        }
        Self::from_ids(ids, num_clusters, profile)
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.num_clusters];
        self.ids.iter().flatten().for_each(|&c| s[c] += 1);
        s
    }

    pub fn members(&self, c: usize) -> Vec<usize> {
        (0..self.ids.len()).filter(|&j| self.ids[j] == Some(c)).collect()
    }
}

/// Cluster the rows of a symmetric correlation matrix `r` into `k` groups.
///
/// Affinity `(r + 1) / 2`, embedding from the top eigenvectors of the
/// normalized affinity `D^-1/2 W D^-1/2` (row-normalized), then k-means.
/// Labels are renumbered in order of first appearance.
pub fn spectral_cluster(r: &Tensor, k: usize, seed: u64) -> Result<Vec<usize>> {
    let n = r.rows();
    if r.cols() != n {
        return Err(Error::Shape(format!("correlation matrix {:?} is not square", r.shape())));
    }
    if k < 2 || k > n {
        return Err(Error::InvalidArgument(format!("cannot form {k} clusters from {n} items")));
    }
    let w = DMatrix::<f64>::from_fn(n, n, |i, j| {
        let a = 0.5 * (r.data()[i * n + j] as f64 + r.data()[j * n + i] as f64);
        ((a + 1.0) / 2.0).clamp(0.0, 1.0)
    });
    let deg: Vec<f64> = (0..n).map(|i| w.row(i).sum()).collect();
    if deg.iter().any(|&d| !(d > 0.0) || !d.is_finite()) {
        return Err(Error::Solver("affinity has an isolated or non-finite row".into()));
    }
    let m = DMatrix::<f64>::from_fn(n, n, |i, j| w[(i, j)] / (deg[i] * deg[j]).sqrt());
    let eig = SymmetricEigen::try_new(m, f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Solver("symmetric eigendecomposition did not converge".into()))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut embed = vec![0f64; n * k];
    for i in 0..n {
        for (c, &e) in order[..k].iter().enumerate() {
            embed[i * k + c] = eig.eigenvectors[(i, e)];
        }
        let norm = embed[i * k..(i + 1) * k].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            embed[i * k..(i + 1) * k].iter_mut().for_each(|v| *v /= norm);
        }
    }
    let labels = kmeans(&embed, n, k, k, seed);
    Ok(canonical_labels(&labels))
}

fn canonical_labels(labels: &[usize]) -> Vec<usize> {
    let mut map = std::collections::HashMap::new();
    labels
        .iter()
        .map(|&l| {
            let next = map.len();
            *map.entry(l).or_insert(next)
        })
        .collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm with k-means++ seeding and restarts; returns the labels
/// of the lowest-inertia run.
pub fn kmeans(points: &[f64], n: usize, dim: usize, k: usize, seed: u64) -> Vec<usize> {
    let base = Rng::new(seed);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for restart in 0..KMEANS_RESTARTS {
        let mut rng = base.fork(restart as u64);
        let (inertia, labels) = kmeans_once(points, n, dim, k, &mut rng);
        if best.as_ref().is_none_or(|(b, _)| inertia < *b) {
            best = Some((inertia, labels));
        }
    }
    best.map(|(_, l)| l).unwrap_or_default()
}

fn kmeans_once(points: &[f64], n: usize, dim: usize, k: usize, rng: &mut Rng) -> (f64, Vec<usize>) {
    let row = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut centers: Vec<f64> = Vec::with_capacity(k * dim);
    centers.extend_from_slice(row(rng.below(n)));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), &centers[..dim])).collect();
    while centers.len() < k * dim {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.uniform() as f64 * total;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.below(n)
        };
        let c = centers.len() / dim;
        centers.extend_from_slice(row(pick));
        for i in 0..n {
            d2[i] = d2[i].min(sq_dist(row(i), &centers[c * dim..(c + 1) * dim]));
        }
    }
    let mut labels = vec![0usize; n];
    for iter in 0..KMEANS_ITERS {
        let mut changed = false;
        for i in 0..n {
            let mut bl = 0;
            let mut bd = f64::INFINITY;
            for c in 0..k {
                let d = sq_dist(row(i), &centers[c * dim..(c + 1) * dim]);
                if d < bd {
                    bd = d;
                    bl = c;
                }
            }
            if labels[i] != bl || iter == 0 {
                changed |= labels[i] != bl;
                labels[i] = bl;
            }
        }
        let mut sums = vec![0f64; k * dim];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[labels[i]] += 1;
            for d in 0..dim {
                sums[labels[i] * dim + d] += points[i * dim + d];
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Re-seed an empty cluster at the point farthest from its center.
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = sq_dist(row(a), &centers[labels[a] * dim..(labels[a] + 1) * dim]);
                        let db = sq_dist(row(b), &centers[labels[b] * dim..(labels[b] + 1) * dim]);
                        da.total_cmp(&db)
                    })
                    .unwrap_or(0);
                centers[c * dim..(c + 1) * dim].copy_from_slice(row(far));
                labels[far] = c;
                changed = true;
            } else {
                for d in 0..dim {
                    centers[c * dim + d] = sums[c * dim + d] / counts[c] as f64;
                }
            }
        }
        if !changed && iter > 0 {
            break;
        }
    }
    let inertia = (0..n).map(|i| sq_dist(row(i), &centers[labels[i] * dim..(labels[i] + 1) * dim])).sum();
    (inertia, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block_matrix(sizes: &[usize], noise: f32, rng: &mut Rng) -> (Tensor, Vec<usize>) {
        let truth: Vec<usize> = sizes.iter().enumerate().flat_map(|(b, &s)| std::iter::repeat_n(b, s)).collect();
        let n = truth.len();
        let mut r = vec![0f32; n * n];
        for i in 0..n {
            for j in i..n {
                let base = if truth[i] == truth[j] { 1.0 } else { 0.0 };
                let v = if i == j { 1.0 } else { (base + noise * (2.0 * rng.uniform() - 1.0)).clamp(-1.0, 1.0) };
                r[i * n + j] = v;
                r[j * n + i] = v;
            }
        }
        (Tensor::matrix(n, n, r).unwrap(), truth)
    }

    #[test]
    fn exact_blocks_are_recovered() {
        let mut rng = Rng::new(0);
        let (r, truth) = block_matrix(&[4, 6], 0.0, &mut rng);
        let labels = spectral_cluster(&r, 2, 1).unwrap();
        assert_eq!(labels, truth);
    }

    #[test]
    fn permutation_equivariance() {
        let mut rng = Rng::new(1);
        let (r, _) = block_matrix(&[5, 5, 5], 0.0, &mut rng);
        let n = r.rows();
        let mut perm: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut perm);
        let permuted = Tensor::matrix(
            n,
            n,
            (0..n * n).map(|i| r.data()[perm[i / n] * n + perm[i % n]]).collect(),
        )
        .unwrap();
        let a = spectral_cluster(&r, 3, 4).unwrap();
        let b = spectral_cluster(&permuted, 3, 4).unwrap();
        for i in 0..n {
            for j in 0..n {
                assert_eq!(a[perm[i]] == a[perm[j]], b[i] == b[j]);
            }
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let mut rng = Rng::new(2);
        let (r, _) = block_matrix(&[7, 8, 9], 0.3, &mut rng);
        assert_eq!(spectral_cluster(&r, 3, 11).unwrap(), spectral_cluster(&r, 3, 11).unwrap());
    }

    #[test]
    fn rejects_bad_cluster_counts() {
        let r = Tensor::filled(&[3, 3], 1.0);
        assert!(spectral_cluster(&r, 1, 0).is_err());
        assert!(spectral_cluster(&r, 4, 0).is_err());
    }
}

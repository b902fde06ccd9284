//! k-nearest-neighbor novelty score.
//!
//! `kNS(x) = d(x, n) / d(n, kNN(n))` with `n` the k-th nearest reference of
//! `x`; both distances are k-th-neighbor distances. Neighbor ranks break
//! distance ties by lower reference index.

use std::collections::HashMap;
use std::sync::Mutex;

use crate::error::{Error, Result};
use crate::tensor::{pairwise_sq_dists, row_sq_norms, Tensor};

const QUERY_BATCH: usize = 256;

pub struct KnnIndex {
    refs: Tensor,
    sq_norms: Vec<f32>,
    max_sq_norm: f32,
    /// Memoized k-th-neighbor distance of each reference, keyed by (k, index).
    own: Mutex<HashMap<(usize, usize), f64>>,
}

fn exact_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>().sqrt()
}

impl KnnIndex {
    pub fn new(refs: Tensor) -> Self {
        let sq_norms = row_sq_norms(&refs);
        let max_sq_norm = sq_norms.iter().copied().fold(0.0, f32::max);
        Self {
            refs,
            sq_norms,
            max_sq_norm,
            own: Mutex::new(HashMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.refs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Exact k-th neighbor `(index, distance)` of `q` given approximate
    /// squared distances, optionally excluding one reference.
    fn kth_from_approx(&self, q: &[f32], approx: &[f32], k: usize, exclude: Option<usize>) -> (usize, f64) {
        let mut vals: Vec<f32> = approx
            .iter()
            .enumerate()
            .filter(|(i, _)| Some(*i) != exclude)
            .map(|(_, &v)| v)
            .collect();
        let kth = {
            let (_, v, _) = vals.select_nth_unstable_by(k - 1, f32::total_cmp);
            *v
        };
        let qn: f32 = q.iter().map(|v| v * v).sum();
        // Bound on the rounding error of the expanded single-precision form.
        let margin = 1e-4 * (qn + self.max_sq_norm) + 1e-6;
        let mut cands: Vec<(f64, usize)> = approx
            .iter()
            .enumerate()
            .filter(|(i, &v)| Some(*i) != exclude && v <= kth + margin)
            .map(|(i, _)| (exact_dist(q, self.refs.row(i)), i))
            .collect();
        cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let (d, i) = cands[k - 1];
        (i, d)
    }

    /// kNS of each query row; `+inf` when the neighbor's own distance is 0.
    pub fn novelty(&self, queries: &Tensor, k: usize) -> Result<Vec<f64>> {
        if k == 0 || self.len() <= k {
            return Err(Error::InvalidArgument(format!(
                "need more than k={k} references, have {}",
                self.len()
            )));
        }
        if queries.cols() != self.refs.cols() {
            return Err(Error::Shape(format!("query width {} vs {}", queries.cols(), self.refs.cols())));
        }
        let mut hits = Vec::with_capacity(queries.rows());
        let mut start = 0;
        while start < queries.rows() {
            let end = (start + QUERY_BATCH).min(queries.rows());
            let qb = queries.slice_rows(start, end);
            let approx = pairwise_sq_dists(&qb, &self.refs, &self.sq_norms);
            for r in 0..qb.rows() {
                hits.push(self.kth_from_approx(qb.row(r), approx.row(r), k, None));
            }
            start = end;
        }
        let mut missing: Vec<usize> = {
            let cache = self.own.lock().expect("knn cache");
            hits.iter().map(|&(n, _)| n).filter(|n| !cache.contains_key(&(k, *n))).collect()
        };
        missing.sort_unstable();
        missing.dedup();
        for chunk in missing.chunks(QUERY_BATCH) {
            let rb = self.refs.select_rows(chunk);
            let approx = pairwise_sq_dists(&rb, &self.refs, &self.sq_norms);
            let found: Vec<f64> = chunk
                .iter()
                .enumerate()
                .map(|(r, &idx)| self.kth_from_approx(rb.row(r), approx.row(r), k, Some(idx)).1)
                .collect();
            let mut cache = self.own.lock().expect("knn cache");
            for (&idx, d) in chunk.iter().zip(found) {
                cache.insert((k, idx), d);
            }
        }
        let cache = self.own.lock().expect("knn cache");
        Ok(hits
            .iter()
            .map(|&(n, num)| {
                let den = cache[&(k, n)];
                if den == 0.0 { f64::INFINITY } else { num / den }
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_geometry() {
        let idx = KnnIndex::new(Tensor::matrix(2, 1, vec![0.0, 1.0]).unwrap());
        let q = Tensor::matrix(2, 1, vec![3.0, 1.0]).unwrap();
        assert_eq!(idx.novelty(&q, 1).unwrap(), vec![2.0, 0.0]);
        assert!(idx.novelty(&q, 2).is_err());
    }

    #[test]
    fn duplicated_neighbor_gives_infinity() {
        let idx = KnnIndex::new(Tensor::matrix(3, 1, vec![0.0, 0.0, 5.0]).unwrap());
        let q = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        assert_eq!(idx.novelty(&q, 1).unwrap(), vec![f64::INFINITY]);
    }
}

//! Reference implementations written independently of the library code.
//! Everything here runs in f64 and favors the obvious formula over speed.

#![allow(dead_code)]

use creadec::nn::{Activation, Network};
use creadec::vae::VaeModel;
use creadec::{Rng, Tensor};

pub struct RefLayer {
    /// Row-major `[in × out]`.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub inputs: usize,
    pub outputs: usize,
    pub act: Activation,
}

pub fn ref_layers(net: &Network) -> Vec<RefLayer> {
    net.layers
        .iter()
        .map(|l| RefLayer {
            w: l.weights.data().iter().map(|&v| v as f64).collect(),
            b: l.bias.data().iter().map(|&v| v as f64).collect(),
            inputs: l.inputs(),
            outputs: l.outputs(),
            act: l.activation,
        })
        .collect()
}

fn act(a: Activation, x: f64) -> f64 {
    match a {
        Activation::Relu => x.max(0.0),
        Activation::Identity => x,
        Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
    }
}

/// Final pre-activation for one input row.
pub fn forward_pre(layers: &[RefLayer], x: &[f64]) -> Vec<f64> {
    let mut cur = x.to_vec();
    let mut pre = Vec::new();
    for (i, l) in layers.iter().enumerate() {
        pre = l.b.clone();
        for (r, &xi) in cur.iter().enumerate() {
            for c in 0..l.outputs {
                pre[c] += xi * l.w[r * l.outputs + c];
            }
        }
        if i + 1 < layers.len() {
            cur = pre.iter().map(|&v| act(l.act, v)).collect();
        }
    }
    pre
}

pub fn forward(layers: &[RefLayer], x: &[f64]) -> Vec<f64> {
    let last = layers.last().expect("layers").act;
    forward_pre(layers, x).into_iter().map(|v| act(last, v)).collect()
}

/// Batch-mean negative ELBO with fixed reparameterization noise.
pub fn elbo_ref(enc: &[RefLayer], dec: &[RefLayer], x: &Tensor, eps: &[f64], z_dim: usize) -> f64 {
    let n = x.rows();
    let mut total = 0.0;
    for r in 0..n {
        let xr: Vec<f64> = x.row(r).iter().map(|&v| v as f64).collect();
        let h = forward(enc, &xr);
        let (mu, lv) = h.split_at(z_dim);
        let z: Vec<f64> = (0..z_dim).map(|j| mu[j] + (0.5 * lv[j]).exp() * eps[r * z_dim + j]).collect();
        let logits = forward_pre(dec, &z);
        for (&l, &xi) in logits.iter().zip(&xr) {
            // -[x ln σ(l) + (1-x) ln(1-σ(l))]
            let p = 1.0 / (1.0 + (-l).exp());
            total -= xi * p.ln() + (1.0 - xi) * (1.0 - p).ln();
        }
        for j in 0..z_dim {
            total += 0.5 * (mu[j] * mu[j] + lv[j].exp() - 1.0 - lv[j]);
        }
    }
    total / n as f64
}

/// Batch-mean softmax cross-entropy.
pub fn cross_entropy_ref(net: &[RefLayer], x: &Tensor, labels: &[u8]) -> f64 {
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let xr: Vec<f64> = x.row(r).iter().map(|&v| v as f64).collect();
        let logits = forward_pre(net, &xr);
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        total += lse - logits[y as usize];
    }
    total / labels.len() as f64
}

/// Central differences of `f` over every weight and bias of `layers`,
/// in the order weights then bias per layer.
pub fn numeric_grad(layers: &mut [RefLayer], f: &dyn Fn(&[RefLayer]) -> f64, h: f64) -> Vec<f64> {
    let mut out = Vec::new();
    for li in 0..layers.len() {
        for which in 0..2 {
            let len = if which == 0 { layers[li].w.len() } else { layers[li].b.len() };
            for k in 0..len {
                let orig = if which == 0 { layers[li].w[k] } else { layers[li].b[k] };
                let eval_at = |v: f64, layers: &mut [RefLayer]| {
                    if which == 0 {
                        layers[li].w[k] = v;
                    } else {
                        layers[li].b[k] = v;
                    }
                    f(layers)
                };
                let up = eval_at(orig + h, layers);
                let down = eval_at(orig - h, layers);
                eval_at(orig, layers);
                out.push((up - down) / (2.0 * h));
            }
        }
    }
    out
}

pub fn flat(grads: &[&Tensor]) -> Vec<f64> {
    grads.iter().flat_map(|t| t.data().iter().map(|&v| v as f64)).collect()
}

/// `‖a − b‖ / ‖b‖`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(1e-300)
}

/// Relative errors of the analytic ELBO gradients of a small random VAE
/// against central differences: `(encoder, decoder)`.
pub fn vae_gradient_errors(seed: u64) -> (f64, f64) {
    use creadec::nn::Mode;
    let mut rng = Rng::new(seed);
    let (n, d, z_dim) = (3, 10, 3);
    let vae = VaeModel::with_hidden(d, &[9, 7], z_dim, 0.0, &mut rng).unwrap();
    let x = Tensor::matrix(n, d, (0..n * d).map(|_| rng.uniform()).collect()).unwrap();
    let noise_seed = seed ^ 0xabcd;
    let out = vae.elbo_loss(&x, 1.0, Mode::Eval, &mut Rng::new(noise_seed)).unwrap();
    // Evaluation mode draws nothing but the reparameterization noise.
    let mut nr = Rng::new(noise_seed);
    let eps: Vec<f64> = (0..n * z_dim).map(|_| nr.normal() as f64).collect();
    let mut enc = ref_layers(&vae.encoder);
    let mut dec = ref_layers(&vae.decoder);
    let dec_fixed = ref_layers(&vae.decoder);
    let enc_fixed = ref_layers(&vae.encoder);
    let num_enc = numeric_grad(&mut enc, &|e| elbo_ref(e, &dec_fixed, &x, &eps, z_dim), 1e-5);
    let num_dec = numeric_grad(&mut dec, &|dd| elbo_ref(&enc_fixed, dd, &x, &eps, z_dim), 1e-5);
    (
        rel_err(&flat(&out.encoder_grads.tensors()), &num_enc),
        rel_err(&flat(&out.decoder_grads.tensors()), &num_dec),
    )
}

/// Same check for the classifier's cross-entropy.
pub fn classifier_gradient_error(seed: u64) -> f64 {
    use creadec::classifier::ClassifierModel;
    use creadec::nn::Mode;
    let mut rng = Rng::new(seed);
    let clf = ClassifierModel::with_widths(&[8, 9, 7, 4], 0.0, &mut rng).unwrap();
    let n = 5;
    let x = Tensor::matrix(n, 8, (0..n * 8).map(|_| rng.uniform()).collect()).unwrap();
    let labels: Vec<u8> = (0..n).map(|i| (i % 4) as u8).collect();
    let out = clf.loss(&x, &labels, Mode::Eval, &mut rng).unwrap();
    let mut layers = ref_layers(&clf.net);
    let num = numeric_grad(&mut layers, &|l| cross_entropy_ref(l, &x, &labels), 1e-5);
    rel_err(&flat(&out.grads.tensors()), &num)
}

fn dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>().sqrt()
}

/// k-th nearest `(index, distance)` of `q` among `refs`, skipping `skip`.
/// Ties go to the lower index.
fn kth(refs: &Tensor, q: &[f32], k: usize, skip: Option<usize>) -> (usize, f64) {
    let mut all: Vec<(f64, usize)> = (0..refs.rows())
        .filter(|&i| Some(i) != skip)
        .map(|i| (dist(q, refs.row(i)), i))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    (all[k - 1].1, all[k - 1].0)
}

/// kNS by exhaustive search.
pub fn knn_novelty_brute(refs: &Tensor, queries: &Tensor, k: usize) -> Vec<f64> {
    (0..queries.rows())
        .map(|r| {
            let (n, d) = kth(refs, queries.row(r), k, None);
            let (_, own) = kth(refs, refs.row(n), k, Some(n));
            if own == 0.0 { f64::INFINITY } else { d / own }
        })
        .collect()
}

/// Fleiss' κ straight from the textbook definition.
pub fn fleiss_ref(counts: &[Vec<usize>]) -> f64 {
    let n_items = counts.len() as f64;
    let raters = counts[0].iter().sum::<usize>() as f64;
    let cats = counts[0].len();
    let mut p_j = vec![0.0; cats];
    let mut p_bar = 0.0;
    for row in counts {
        let mut agree = 0.0;
        for (j, &c) in row.iter().enumerate() {
            p_j[j] += c as f64;
            agree += (c * c) as f64;
        }
        p_bar += (agree - raters) / (raters * (raters - 1.0));
    }
    p_bar /= n_items;
    let p_e: f64 = p_j.iter().map(|&s| (s / (n_items * raters)).powi(2)).sum();
    (p_bar - p_e) / (1.0 - p_e)
}

/// The 10 subjects × 14 raters × 5 categories worked example; κ ≈ 0.210.
pub fn fleiss_worked_example() -> Vec<Vec<usize>> {
    vec![
        vec![0, 0, 0, 0, 14],
        vec![0, 2, 6, 4, 2],
        vec![0, 0, 3, 5, 6],
        vec![0, 3, 9, 2, 0],
        vec![2, 2, 8, 1, 1],
        vec![7, 7, 0, 0, 0],
        vec![3, 2, 6, 3, 0],
        vec![2, 5, 3, 2, 2],
        vec![6, 5, 2, 1, 0],
        vec![0, 2, 2, 3, 7],
    ]
}

/// Adjusted Rand index of two labelings.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    use std::collections::HashMap;
    let c2 = |n: usize| (n * n.saturating_sub(1)) as f64 / 2.0;
    let mut table: HashMap<(usize, usize), usize> = HashMap::new();
    let mut ra: HashMap<usize, usize> = HashMap::new();
    let mut rb: HashMap<usize, usize> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *ra.entry(x).or_default() += 1;
        *rb.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&n| c2(n)).sum();
    let sa: f64 = ra.values().map(|&n| c2(n)).sum();
    let sb: f64 = rb.values().map(|&n| c2(n)).sum();
    let expected = sa * sb / c2(a.len());
    let max = 0.5 * (sa + sb);
    (index - expected) / (max - expected)
}

/// `n` draws from `N(mu, Q diag(var) Qᵀ)` with `Q` a fixed rotation.
pub fn rotated_gaussian(n: usize, mu: &[f64], var: &[f64], q: &[Vec<f64>], rng: &mut Rng) -> Tensor {
    let d = mu.len();
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let e: Vec<f64> = var.iter().map(|v| v.sqrt() * rng.normal() as f64).collect();
        for i in 0..d {
            let v: f64 = mu[i] + (0..d).map(|j| q[i][j] * e[j]).sum::<f64>();
            data.push(v as f32);
        }
    }
    Tensor::matrix(n, d, data).unwrap()
}

/// Orthonormal basis from Gram-Schmidt on a random matrix.
pub fn random_rotation(d: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut cols: Vec<Vec<f64>> = Vec::new();
    while cols.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.normal() as f64).collect();
        for c in &cols {
            let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            cols.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    // Return as rows of Q with the basis vectors as columns.
    (0..d).map(|i| (0..d).map(|j| cols[j][i]).collect()).collect()
}

/// Fréchet distance between two Gaussians sharing eigenvectors:
/// `‖μ₁ − μ₂‖² + Σ (√λ₁ − √λ₂)²`.
pub fn frechet_commuting(mu1: &[f64], var1: &[f64], mu2: &[f64], var2: &[f64]) -> f64 {
    let m: f64 = mu1.iter().zip(mu2).map(|(a, b)| (a - b).powi(2)).sum();
    let s: f64 = var1.iter().zip(var2).map(|(a, b)| (a.sqrt() - b.sqrt()).powi(2)).sum();
    m + s
}

/// ν-one-class SVM dual `min ½ αᵀKα` over `0 ≤ α ≤ 1/(νn)`, `Σα = 1`, by
/// projected gradient descent. Returns `(alpha, rho)`.
pub fn ocsvm_projected_gradient(x: &[[f64; 2]], gamma: f64, nu: f64, iters: usize) -> (Vec<f64>, f64) {
    let n = x.len();
    let k: Vec<Vec<f64>> = x
        .iter()
        .map(|a| x.iter().map(|b| (-gamma * ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2))).exp()).collect())
        .collect();
    let c = 1.0 / (nu * n as f64);
    // Project onto the capped simplex by bisection on the shift.
    let project = |v: &[f64]| -> Vec<f64> {
        let (mut lo, mut hi) = (-1.0 - v.iter().cloned().fold(f64::MIN, f64::max), 1.0 - v.iter().cloned().fold(f64::MAX, f64::min));
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let s: f64 = v.iter().map(|&a| (a + mid).clamp(0.0, c)).sum();
            if s > 1.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let t = 0.5 * (lo + hi);
        v.iter().map(|&a| (a + t).clamp(0.0, c)).collect()
    };
    let step = 1.0 / n as f64;
    let mut alpha = project(&vec![1.0 / n as f64; n]);
    for _ in 0..iters {
        let g: Vec<f64> = (0..n).map(|i| (0..n).map(|j| k[i][j] * alpha[j]).sum()).collect();
        let moved: Vec<f64> = alpha.iter().zip(&g).map(|(a, gi)| a - step * gi).collect();
        alpha = project(&moved);
    }
    let g: Vec<f64> = (0..n).map(|i| (0..n).map(|j| k[i][j] * alpha[j]).sum()).collect();
    let free: Vec<f64> = (0..n).filter(|&i| alpha[i] > 1e-6 * c && alpha[i] < c * (1.0 - 1e-6)).map(|i| g[i]).collect();
    let rho = if free.is_empty() {
        let lower = (0..n).filter(|&i| alpha[i] >= c * (1.0 - 1e-6)).map(|i| g[i]).fold(f64::MIN, f64::max);
        let upper = (0..n).filter(|&i| alpha[i] <= 1e-6 * c).map(|i| g[i]).fold(f64::MAX, f64::min);
        0.5 * (lower + upper)
    } else {
        free.iter().sum::<f64>() / free.len() as f64
    };
    (alpha, rho)
}

/// Least-squares residual `‖x − (zW + b)‖` minimized over `z`, via the
/// normal equations (`W` is `[d × m]`, row-major, `d ≤ 3`).
pub fn linear_projection_residual(w: &[f64], b: &[f64], d: usize, x: &[f64]) -> f64 {
    let m = b.len();
    let y: Vec<f64> = x.iter().zip(b).map(|(a, c)| a - c).collect();
    // A = W Wᵀ (d × d), r = W y.
    let mut a = vec![vec![0.0; d + 1]; d];
    for i in 0..d {
        for j in 0..d {
            a[i][j] = (0..m).map(|c| w[i * m + c] * w[j * m + c]).sum();
        }
        a[i][d] = (0..m).map(|c| w[i * m + c] * y[c]).sum();
    }
    // Gauss-Jordan with partial pivoting.
    for col in 0..d {
        let piv = (col..d).max_by(|&p, &q| a[p][col].abs().total_cmp(&a[q][col].abs())).unwrap();
        a.swap(col, piv);
        for r in 0..d {
            if r != col {
                let f = a[r][col] / a[col][col];
                for c in col..=d {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    let z: Vec<f64> = (0..d).map(|i| a[i][d] / a[i][i]).collect();
    (0..m)
        .map(|c| {
            let fit: f64 = (0..d).map(|i| z[i] * w[i * m + c]).sum();
            (y[c] - fit).powi(2)
        })
        .sum::<f64>()
        .sqrt()
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns `(eigenvalues, eigenvectors as columns)`.
pub fn jacobi_eigen(a: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut a = a.to_vec();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j].powi(2)).sum();
        if off < 1e-26 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i][i]).collect(), v)
}

fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    (0..n).map(|i| (0..n).map(|j| (0..n).map(|k| a[i][k] * b[k][j]).sum()).collect()).collect()
}

fn sqrt_psd(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (vals, vecs) = jacobi_eigen(a);
    let n = a.len();
    (0..n)
        .map(|i| (0..n).map(|j| (0..n).map(|k| vecs[i][k] * vals[k].max(0.0).sqrt() * vecs[j][k]).sum()).collect())
        .collect()
}

/// Sample mean and unbiased covariance of the rows of `x`.
pub fn moments(x: &Tensor) -> (Vec<f64>, Vec<Vec<f64>>) {
    let (n, d) = (x.rows(), x.cols());
    let mu: Vec<f64> = (0..d).map(|j| (0..n).map(|r| x.row(r)[j] as f64).sum::<f64>() / n as f64).collect();
    let cov = (0..d)
        .map(|i| {
            (0..d)
                .map(|j| (0..n).map(|r| (x.row(r)[i] as f64 - mu[i]) * (x.row(r)[j] as f64 - mu[j])).sum::<f64>() / (n - 1) as f64)
                .collect()
        })
        .collect();
    (mu, cov)
}

/// `‖μ₁ − μ₂‖² + tr(Σ₁ + Σ₂ − 2 (Σ₁^½ Σ₂ Σ₁^½)^½)` for arbitrary covariances.
pub fn frechet_general(mu1: &[f64], s1: &[Vec<f64>], mu2: &[f64], s2: &[Vec<f64>]) -> f64 {
    let r1 = sqrt_psd(s1);
    let inner = sqrt_psd(&matmul(&matmul(&r1, s2), &r1));
    let m: f64 = mu1.iter().zip(mu2).map(|(a, b)| (a - b).powi(2)).sum();
    m + (0..mu1.len()).map(|i| s1[i][i] + s2[i][i] - 2.0 * inner[i][i]).sum::<f64>()
}

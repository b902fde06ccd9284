//! Creative decoding: neuron flipping at a hidden decoder layer, plus the
//! noise, random-flip and latent-interpolation baselines.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::atlas::{off_on_sets, Atlas, LayerProfile};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::vae::VaeModel;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    #[default]
    Regular,
    LowActive,
    Correlation,
    Cluster,
    NonSpecific,
    RandomFlip,
    Noisy,
    Interpolation,
    FlipOffActive,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::Regular,
        Method::LowActive,
        Method::Correlation,
        Method::Cluster,
        Method::NonSpecific,
        Method::RandomFlip,
        Method::Noisy,
        Method::Interpolation,
        Method::FlipOffActive,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Regular => "regular",
            Method::LowActive => "low-active",
            Method::Correlation => "correlation",
            Method::Cluster => "cluster",
            Method::NonSpecific => "non-specific",
            Method::RandomFlip => "random-flip",
            Method::Noisy => "noisy",
            Method::Interpolation => "interpolation",
            Method::FlipOffActive => "flip-off-active",
        }
    }

    /// Methods that modify a hidden layer of the decoder.
    pub fn is_layer_method(self) -> bool {
        !matches!(self, Method::Regular | Method::Interpolation)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OnStat {
    #[default]
    Max,
    Mean,
}

impl FromStr for OnStat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(OnStat::Max),
            "mean" => Ok(OnStat::Mean),
            _ => Err(Error::InvalidArgument(format!("unknown activation statistic {s:?} (max or mean)"))),
        }
    }
}

/// Declarative description of one decoding modification.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Intervention {
    pub method: Method,
    /// Hidden decoder layer, 1-based.
    pub layer: usize,
    /// Flip budget: a count when `>= 1`, otherwise a fraction of the pool.
    pub rho: f64,
    /// Percentile window `[lo, hi]` (0..=100) on percent activation of alive
    /// neurons. The correlation method uses `hi / 100` as its selection fraction.
    pub kappa: [f64; 2],
    pub stat: OnStat,
    pub lambda: f32,
    /// Noise scale; `None` uses each neuron's training standard deviation.
    pub noise_sigma: Option<f32>,
    pub noise_fraction: f64,
    /// Interpolation endpoint count.
    pub endpoints: usize,
    /// Interpolation weight on the mean of the later endpoints; `None` gives `(m-1)/m`.
    pub alpha: Option<f32>,
    /// Number of lowest-activation clusters the cluster method draws from.
    pub clusters: usize,
    /// Non-specific pool: cap on the maximum per-class percent activation.
    pub class_cap: f32,
    /// Non-specific pool: keep the top fraction of neurons by class entropy.
    pub entropy_top: f64,
    /// Correlation method: also switch off as many highly active neurons.
    pub turn_off_correlated: bool,
    pub seed: u64,
}

impl Default for Intervention {
    fn default() -> Self {
        Self {
            method: Method::Regular,
            layer: 3,
            rho: 5.0,
            kappa: [1.0, 15.0],
            stat: OnStat::Max,
            lambda: 2.0,
            noise_sigma: None,
            noise_fraction: 0.25,
            endpoints: 2,
            alpha: None,
            clusters: 1,
            class_cap: 0.15,
            entropy_top: 0.30,
            turn_off_correlated: false,
            seed: 0,
        }
    }
}

impl Intervention {
    pub fn new(method: Method) -> Self {
        Self { method, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.layer == 0 {
            return bad("layer is 1-based");
        }
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return bad("rho must be a non-negative number");
        }
        let [lo, hi] = self.kappa;
        if !(0.0..=100.0).contains(&lo) || !(0.0..=100.0).contains(&hi) || lo > hi {
            return bad("kappa must be a window 0 <= lo <= hi <= 100");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be non-negative");
        }
        if self.noise_sigma.is_some_and(|s| !(s >= 0.0)) {
            return bad("noise sigma must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.noise_fraction) {
            return bad("noise fraction must lie in [0, 1]");
        }
        if self.endpoints < 2 && self.method == Method::Interpolation {
            return bad("interpolation needs at least 2 endpoints");
        }
        if self.alpha.is_some_and(|a| !(0.0..=1.0).contains(&a)) {
            return bad("alpha must lie in [0, 1]");
        }
        if self.clusters == 0 {
            return bad("cluster count must be positive");
        }
        if !(0.0..=1.0).contains(&self.entropy_top) {
            return bad("entropy_top must lie in [0, 1]");
        }
        Ok(())
    }

    /// Whether this intervention is guaranteed to leave decoding unchanged.
    pub fn is_identity(&self) -> bool {
        match self.method {
            Method::Regular => true,
            Method::Noisy => self.noise_fraction == 0.0 || self.noise_sigma == Some(0.0),
            Method::Interpolation => false,
            _ => self.rho == 0.0,
        }
    }
}

/// What an intervention actually did to one layer output.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FlipRecord {
    pub flipped: Vec<usize>,
    /// Value assigned to each flipped neuron.
    pub on_values: Vec<f32>,
    /// Requested flips that could not be made because the pool was too small.
    pub shortfall: usize,
    /// Training-set indices of interpolation endpoints.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub endpoints: Vec<usize>,
}

/// `o_j = lambda * s(training activations of j)`.
pub fn on_value(profile: &LayerProfile, j: usize, stat: OnStat, lambda: f32) -> Result<f32> {
    if j >= profile.width() {
        return Err(Error::InvalidArgument(format!("neuron {j} outside layer of {}", profile.width())));
    }
    if profile.is_dead(j) {
        return Err(Error::InvalidArgument(format!("neuron {j} is dead")));
    }
    Ok(lambda
        * match stat {
            OnStat::Max => profile.max[j],
            OnStat::Mean => profile.mean[j],
        })
}

/// Flip budget for a pool of `size` neurons.
pub fn budget(rho: f64, size: usize) -> usize {
    if rho >= 1.0 {
        rho.floor() as usize
    } else {
        (rho * size as f64).floor() as usize
    }
}

/// Linear-interpolation percentile (`q` in 0..=100) of unsorted values.
pub fn percentile(values: &[f32], q: f64) -> f32 {
    if values.is_empty() {
        return f32::NAN;
    }
    let mut v: Vec<f32> = values.to_vec();
    v.sort_by(f32::total_cmp);
    let pos = q.clamp(0.0, 100.0) / 100.0 * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    let frac = (pos - lo as f64) as f32;
    v[lo] + (v[hi] - v[lo]) * frac
}

/// The `count` members of `pool` most correlated with `seed`, by descending
/// correlation with lower index breaking ties. The seed itself (`R_ss = 1`)
/// ranks first; constant neurons rank last.
pub fn most_correlated(profile: &LayerProfile, seed: usize, pool: &[usize], count: usize) -> Vec<usize> {
    let key = |j: usize| -> f32 {
        if j == seed {
            f32::INFINITY
        } else if profile.has_variance(j) {
            profile.corr_at(seed, j)
        } else {
            f32::NEG_INFINITY
        }
    };
    let mut sorted = pool.to_vec();
    sorted.sort_by(|&a, &b| key(b).total_cmp(&key(a)).then(a.cmp(&b)));
    sorted.truncate(count);
    sorted
}

/// Low-active pool: off neurons whose percent activation lies inside the
/// `kappa` percentile window of the alive neurons.
pub fn low_active_pool(profile: &LayerProfile, off: &[usize], kappa: [f64; 2]) -> Vec<usize> {
    let alive: Vec<f32> = profile.alive().iter().map(|&j| profile.percent[j]).collect();
    let lo = percentile(&alive, kappa[0]);
    let hi = percentile(&alive, kappa[1]);
    off.iter()
        .copied()
        .filter(|&j| profile.percent[j] >= lo && profile.percent[j] <= hi)
        .collect()
}

fn pick_by_seed(profile: &LayerProfile, pool: &[usize], rho: f64, rng: &mut Rng) -> Result<(Vec<usize>, usize)> {
    let want = budget(rho, pool.len());
    if want == 0 {
        return Ok((Vec::new(), 0));
    }
    let seed = *rng
        .choose(pool)
        .ok_or_else(|| Error::EmptyPool("no candidate neurons for this latent".into()))?;
    let chosen = most_correlated(profile, seed, pool, want);
    let shortfall = want - chosen.len();
    Ok((chosen, shortfall))
}

pub fn select_low_active(
    profile: &LayerProfile,
    off: &[usize],
    kappa: [f64; 2],
    rho: f64,
    rng: &mut Rng,
) -> Result<(Vec<usize>, usize)> {
    let pool = low_active_pool(profile, off, kappa);
    if pool.is_empty() && budget(rho, 0) > 0 {
        return Err(Error::EmptyPool("low-active window holds no off neurons".into()));
    }
    pick_by_seed(profile, &pool, rho, rng)
}

/// `gamma_j = (1/|A|) sum_{h in A} R_jh d_h` for every `j` in `off`.
pub fn correlation_gamma(profile: &LayerProfile, on: &[usize], off: &[usize], output: &[f32]) -> Vec<f32> {
    let inv = 1.0 / on.len().max(1) as f64;
    off.iter()
        .map(|&j| (on.iter().map(|&h| profile.corr_at(j, h) as f64 * output[h] as f64).sum::<f64>() * inv) as f32)
        .collect()
}

pub fn select_correlation(
    profile: &LayerProfile,
    on: &[usize],
    off: &[usize],
    output: &[f32],
    kappa: f64,
    rho: f64,
    rng: &mut Rng,
) -> Result<(Vec<usize>, usize)> {
    if on.is_empty() || off.is_empty() {
        return Err(Error::EmptyPool("correlation method needs both on and off neurons".into()));
    }
    let want = budget(rho, on.len());
    if want == 0 {
        return Ok((Vec::new(), 0));
    }
    let gamma = correlation_gamma(profile, on, off, output);
    let mut order: Vec<usize> = (0..off.len()).collect();
    order.sort_by(|&a, &b| gamma[a].total_cmp(&gamma[b]).then(off[a].cmp(&off[b])));
    let lowest = ((kappa * off.len() as f64).floor() as usize).clamp(1, off.len());
    let seed = off[order[rng.below(lowest)]];
    let chosen = most_correlated(profile, seed, off, want);
    let shortfall = want - chosen.len();
    Ok((chosen, shortfall))
}

/// On-set members most aligned with the active pattern (for the optional
/// turn-off step of the correlation method).
pub fn most_active_aligned(profile: &LayerProfile, on: &[usize], output: &[f32], count: usize) -> Vec<usize> {
    let score = correlation_gamma(profile, on, on, output);
    let mut order: Vec<usize> = (0..on.len()).collect();
    order.sort_by(|&a, &b| score[b].total_cmp(&score[a]).then(on[a].cmp(&on[b])));
    order.into_iter().take(count).map(|i| on[i]).collect()
}

/// Per-cluster fraction of members on for this output.
pub fn cluster_activation(profile: &LayerProfile, output: &[f32]) -> Result<Vec<f32>> {
    let clusters = profile
        .clusters
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument(format!("layer {} has no clusters", profile.layer)))?;
    let mut on = vec![0usize; clusters.num_clusters];
    let mut size = vec![0usize; clusters.num_clusters];
    for (j, id) in clusters.ids.iter().enumerate() {
        if let Some(c) = *id {
            size[c] += 1;
            if output[j] > profile.tau {
                on[c] += 1;
            }
        }
    }
    Ok(on.iter().zip(&size).map(|(&a, &n)| a as f32 / n.max(1) as f32).collect())
}

pub fn select_cluster(
    profile: &LayerProfile,
    output: &[f32],
    rho: f64,
    num_clusters: usize,
    rng: &mut Rng,
) -> Result<(Vec<usize>, usize)> {
    let clusters = profile
        .clusters
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument(format!("layer {} has no clusters", profile.layer)))?;
    let activation = cluster_activation(profile, output)?;
    let off_in = |c: usize| -> Vec<usize> {
        clusters
            .members(c)
            .into_iter()
            .filter(|&j| output[j] <= profile.tau)
            .collect()
    };
    // Shuffle first so that equally active clusters are picked at random.
    let mut order: Vec<usize> = (0..clusters.num_clusters).filter(|&c| !off_in(c).is_empty()).collect();
    rng.shuffle(&mut order);
    order.sort_by(|&a, &b| activation[a].total_cmp(&activation[b]));
    if order.is_empty() {
        if budget(rho, 0) == 0 && rho < 1.0 {
            return Ok((Vec::new(), 0));
        }
        return Err(Error::EmptyPool("every cluster is fully active".into()));
    }
    let pool: Vec<usize> = order.iter().take(num_clusters).flat_map(|&c| off_in(c)).collect();
    let want = budget(rho, pool.len());
    let picks = rng.sample_indices(pool.len(), want);
    let mut chosen: Vec<usize> = picks.into_iter().map(|i| pool[i]).collect();
    chosen.sort_unstable();
    Ok((chosen.clone(), want - chosen.len()))
}

/// Non-specific pool: off neurons with a low per-class maximum and a high
/// class entropy.
pub fn nonspecific_pool(profile: &LayerProfile, off: &[usize], class_cap: f32, entropy_top: f64) -> Vec<usize> {
    let alive: Vec<f32> = profile.alive().iter().map(|&j| profile.class_entropy[j]).collect();
    let cut = percentile(&alive, 100.0 * (1.0 - entropy_top));
    off.iter()
        .copied()
        .filter(|&j| {
            let max_class = profile.class_percent.row(j).iter().copied().fold(0.0f32, f32::max);
            let h = profile.class_entropy[j];
            max_class <= class_cap && h > 0.0 && h >= cut
        })
        .collect()
}

pub fn select_nonspecific(
    profile: &LayerProfile,
    off: &[usize],
    class_cap: f32,
    entropy_top: f64,
    rho: f64,
    rng: &mut Rng,
) -> Result<(Vec<usize>, usize)> {
    let pool = nonspecific_pool(profile, off, class_cap, entropy_top);
    if pool.is_empty() && budget(rho, 0) > 0 {
        return Err(Error::EmptyPool("no off neuron passes the non-specific filters".into()));
    }
    pick_by_seed(profile, &pool, rho, rng)
}

fn random_subset(pool: &[usize], rho: f64, rng: &mut Rng) -> (Vec<usize>, usize) {
    let want = budget(rho, pool.len());
    let mut chosen: Vec<usize> = rng.sample_indices(pool.len(), want).into_iter().map(|i| pool[i]).collect();
    chosen.sort_unstable();
    let short = want - chosen.len();
    (chosen, short)
}

/// Modify one layer output in place according to `iv`.
pub fn apply_intervention(
    output: &mut [f32],
    iv: &Intervention,
    profile: &LayerProfile,
    rng: &mut Rng,
) -> Result<FlipRecord> {
    if output.len() != profile.width() {
        return Err(Error::Shape(format!(
            "layer output of width {} for a profile of width {}",
            output.len(),
            profile.width()
        )));
    }
    if iv.is_identity() {
        return Ok(FlipRecord::default());
    }
    let sets = off_on_sets(profile, output);
    let turn_on = |output: &mut [f32], chosen: Vec<usize>, shortfall: usize| -> Result<FlipRecord> {
        let mut on_values = Vec::with_capacity(chosen.len());
        for &j in &chosen {
            let v = on_value(profile, j, iv.stat, iv.lambda)?;
            output[j] = v;
            on_values.push(v);
        }
        Ok(FlipRecord {
            flipped: chosen,
            on_values,
            shortfall,
            endpoints: Vec::new(),
        })
    };
    match iv.method {
        Method::Regular | Method::Interpolation => Ok(FlipRecord::default()),
        Method::LowActive => {
            let (chosen, short) = select_low_active(profile, &sets.off, iv.kappa, iv.rho, rng)?;
            turn_on(output, chosen, short)
        }
        Method::Correlation => {
            let snapshot = output.to_vec();
            let (chosen, short) =
                select_correlation(profile, &sets.on, &sets.off, &snapshot, iv.kappa[1] / 100.0, iv.rho, rng)?;
            let count = chosen.len();
            let mut rec = turn_on(output, chosen, short)?;
            if iv.turn_off_correlated {
                for j in most_active_aligned(profile, &sets.on, &snapshot, count) {
                    output[j] = 0.0;
                    rec.flipped.push(j);
                    rec.on_values.push(0.0);
                }
            }
            Ok(rec)
        }
        Method::Cluster => {
            let (chosen, short) = select_cluster(profile, output, iv.rho, iv.clusters, rng)?;
            turn_on(output, chosen, short)
        }
        Method::NonSpecific => {
            let (chosen, short) = select_nonspecific(profile, &sets.off, iv.class_cap, iv.entropy_top, iv.rho, rng)?;
            turn_on(output, chosen, short)
        }
        Method::RandomFlip => {
            let (chosen, short) = random_subset(&sets.off, iv.rho, rng);
            turn_on(output, chosen, short)
        }
        Method::FlipOffActive => {
            let (chosen, short) = random_subset(&sets.on, iv.rho, rng);
            let n = chosen.len();
            chosen.iter().for_each(|&j| output[j] = 0.0);
            Ok(FlipRecord {
                flipped: chosen,
                on_values: vec![0.0; n],
                shortfall: short,
                endpoints: Vec::new(),
            })
        }
        Method::Noisy => Ok(add_noise(output, profile, iv.noise_sigma, iv.noise_fraction, rng)),
    }
}

fn add_noise(output: &mut [f32], profile: &LayerProfile, sigma: Option<f32>, fraction: f64, rng: &mut Rng) -> FlipRecord {
    let p = output.len();
    let count = (fraction * p as f64).round() as usize;
    let mut idx = rng.sample_indices(p, count);
    idx.sort_unstable();
    let mut values = Vec::with_capacity(idx.len());
    for &j in &idx {
        let s = sigma.unwrap_or(profile.std[j]);
        output[j] = (output[j] + s * rng.normal()).max(0.0);
        values.push(output[j]);
    }
    FlipRecord {
        flipped: idx,
        on_values: values,
        shortfall: 0,
        endpoints: Vec::new(),
    }
}

fn check_layer(vae: &VaeModel, k: usize) -> Result<()> {
    if k == 0 || k > vae.decoder_hidden_layers() {
        return Err(Error::InvalidArgument(format!(
            "decoder has hidden layers 1..={}, got {k}",
            vae.decoder_hidden_layers()
        )));
    }
    Ok(())
}

/// Selection stream of a sample seed (the latent is drawn from stream 0).
pub fn selection_rng(seed: u64) -> Rng {
    Rng::new(seed).fork(1)
}

/// Decode one latent with a layer intervention; returns the image row.
pub fn decode_with_intervention(
    vae: &VaeModel,
    z: &[f32],
    iv: &Intervention,
    atlas: &Atlas,
) -> Result<(Vec<f32>, FlipRecord)> {
    iv.validate()?;
    let zt = Tensor::matrix(1, z.len(), z.to_vec())?;
    if !iv.method.is_layer_method() || iv.is_identity() {
        return Ok((vae.decode(&zt)?.into_data(), FlipRecord::default()));
    }
    check_layer(vae, iv.layer)?;
    let profile = atlas.layer(iv.layer)?;
    let mut hidden = vae.decoder.eval_range(0..iv.layer, &zt)?;
    let mut rng = selection_rng(iv.seed);
    let record = apply_intervention(hidden.data_mut(), iv, profile, &mut rng)?;
    let out = vae.decoder.eval_range(iv.layer..vae.decoder.layers.len(), &hidden)?;
    Ok((out.into_data(), record))
}

/// Convex combination `(1 - alpha) z_1 + alpha * mean(z_2..z_m)`.
pub fn interpolate(endpoints: &[&[f32]], alpha: f32) -> Result<Vec<f32>> {
    let first = endpoints
        .first()
        .ok_or_else(|| Error::InvalidArgument("no interpolation endpoints".into()))?;
    if endpoints.len() == 1 {
        return Ok(first.to_vec());
    }
    let rest = &endpoints[1..];
    if rest.iter().any(|e| e.len() != first.len()) {
        return Err(Error::Shape("interpolation endpoints differ in width".into()));
    }
    let inv = 1.0 / rest.len() as f32;
    Ok((0..first.len())
        .map(|d| {
            let mean: f32 = rest.iter().map(|e| e[d]).sum::<f32>() * inv;
            (1.0 - alpha) * first[d] + alpha * mean
        })
        .collect())
}

/// Draw `m` encoded training points from distinct classes and mix them.
/// Returns the mixed latent and the chosen row indices.
pub fn interpolation_latent(
    latents: &Tensor,
    labels: &[u8],
    m: usize,
    alpha: Option<f32>,
    rng: &mut Rng,
) -> Result<(Vec<f32>, Vec<usize>)> {
    if labels.len() != latents.rows() {
        return Err(Error::Shape("latents and labels disagree".into()));
    }
    let mut classes: Vec<u8> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < m {
        return Err(Error::InvalidArgument(format!(
            "interpolation over {m} classes but only {} present",
            classes.len()
        )));
    }
    let picked: Vec<u8> = rng.sample_indices(classes.len(), m).into_iter().map(|i| classes[i]).collect();
    let mut rows = Vec::with_capacity(m);
    for c in picked {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        rows.push(*rng.choose(&members).expect("class is present"));
    }
    let alpha = alpha.unwrap_or((m - 1) as f32 / m as f32);
    let ends: Vec<&[f32]> = rows.iter().map(|&r| latents.row(r)).collect();
    Ok((interpolate(&ends, alpha)?, rows))
}

/// Decode an interpolation between `m` training latents of distinct classes.
pub fn interpolation_baseline(
    vae: &VaeModel,
    latents: &Tensor,
    labels: &[u8],
    m: usize,
    alpha: Option<f32>,
    rng: &mut Rng,
) -> Result<(Vec<f32>, Vec<f32>, Vec<usize>)> {
    let (z, rows) = interpolation_latent(latents, labels, m, alpha, rng)?;
    let image = vae.decode(&Tensor::matrix(1, z.len(), z.clone())?)?.into_data();
    Ok((z, image, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::atlas::{profile_activations, TAU};

    fn profile_from(rows: &[Vec<f32>], labels: &[u8], classes: usize) -> LayerProfile {
        profile_activations(&Tensor::stack_rows(rows).unwrap(), labels, classes, 1, TAU).unwrap()
    }

    /// Profile whose percent activations are exactly `pcts` (over 100 rows).
    fn profile_with_percent(pcts: &[f32]) -> LayerProfile {
        let rows: Vec<Vec<f32>> = (0..100)
            .map(|r| pcts.iter().enumerate().map(|(j, &p)| if (r as f32) < p * 100.0 { 0.5 + 0.01 * ((r * 7 + j * 3) % 11) as f32 } else { 0.0 }).collect())
            .collect();
        profile_from(&rows, &vec![0; 100], 1)
    }

    #[test]
    fn on_value_examples() {
        let rows = vec![vec![0.8, 0.2], vec![0.1, 0.4]];
        let p = profile_from(&rows, &[0, 0], 1);
        assert!((on_value(&p, 0, OnStat::Max, 2.0).unwrap() - 1.6).abs() < 1e-6);
        assert_eq!(on_value(&p, 0, OnStat::Max, 1.0).unwrap(), 0.8);
        assert!((on_value(&p, 1, OnStat::Mean, 1.5).unwrap() - 0.45).abs() < 1e-6);
        let dead = profile_from(&[vec![0.0], vec![0.0]], &[0, 0], 1);
        assert!(on_value(&dead, 0, OnStat::Max, 2.0).is_err());
    }

    #[test]
    fn budget_reads_counts_and_fractions() {
        assert_eq!(budget(5.0, 2), 5);
        assert_eq!(budget(0.5, 7), 3);
        assert_eq!(budget(0.1, 5), 0);
        assert_eq!(budget(0.0, 100), 0);
    }

    #[test]
    fn percentile_filter_example() {
        let p = profile_with_percent(&[0.01, 0.02, 0.50, 0.60]);
        assert_eq!(low_active_pool(&p, &[0, 1, 2, 3], [0.0, 50.0]), vec![0, 1]);
    }

    #[test]
    fn zero_budget_leaves_output_alone() {
        let p = profile_with_percent(&[0.01, 0.02, 0.50, 0.60]);
        let mut rng = Rng::new(0);
        let (chosen, short) = select_low_active(&p, &[0, 1], [0.0, 50.0], 0.4, &mut rng).unwrap();
        assert!(chosen.is_empty());
        assert_eq!(short, 0);
    }

    #[test]
    fn most_correlated_sorts_and_includes_seed() {
        // Neuron 0 is the seed; correlations to 1..=4 are 0.9, 0.1, -0.2, 0.8.
        let mut rng = Rng::new(1);
        let base: Vec<f32> = (0..4000).map(|_| rng.normal()).collect();
        let target = [0.9f32, 0.1, -0.2, 0.8];
        let rows: Vec<Vec<f32>> = (0..4000)
            .map(|i| {
                let mut r = vec![base[i]];
                for (t, &c) in target.iter().enumerate() {
                    let noise = ((i * 31 + t * 17) % 97) as f32 / 97.0 - 0.5;
                    r.push(c * base[i] + (1.0 - c * c).sqrt() * noise * 3.4);
                }
                r
            })
            .collect();
        let p = profile_from(&rows, &vec![0; 4000], 1);
        let got = most_correlated(&p, 0, &[0, 1, 2, 3, 4], 3);
        assert_eq!(got, vec![0, 1, 4]);
        assert_eq!(most_correlated(&p, 0, &[1, 2, 3, 4], 2), vec![1, 4]);
    }

    #[test]
    fn gamma_sign_and_hand_values() {
        // Perfect anti-correlation between neurons 0 and 1.
        let rows: Vec<Vec<f32>> = (0..10).map(|i| vec![i as f32, 9.0 - i as f32, (i % 2) as f32]).collect();
        let p = profile_from(&rows, &vec![0; 10], 1);
        let g = correlation_gamma(&p, &[0], &[1, 2], &[2.0, 0.0, 0.0]);
        assert!((g[0] + 2.0).abs() < 1e-5);
        assert!(g[0] < g[1]);
        let r02 = p.corr_at(0, 2) as f64;
        assert!((g[1] as f64 - r02 * 2.0).abs() < 1e-5);
    }

    #[test]
    fn cluster_method_fills_least_active_cluster() {
        let rows: Vec<Vec<f32>> = (0..20).map(|i| (0..10).map(|j| ((i + j) % 3) as f32).collect()).collect();
        let mut p = profile_from(&rows, &vec![0; 20], 1);
        let ids: Vec<Option<usize>> = (0..10).map(|j| Some(usize::from(j >= 5))).collect();
        p.clusters = Some(crate::spectral::ClusterAssignment::from_ids(ids, 2, &p).unwrap());
        // Cluster 0 has 1/5 on (0.2), cluster 1 has 4/5 on (0.8).
        let out = [1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0];
        assert_eq!(cluster_activation(&p, &out).unwrap(), vec![0.2, 0.8]);
        for seed in 0..20 {
            let (chosen, short) = select_cluster(&p, &out, 3.0, 1, &mut Rng::new(seed)).unwrap();
            assert_eq!(short, 0);
            assert_eq!(chosen.len(), 3);
            assert!(chosen.iter().all(|&j| (1..5).contains(&j)));
        }
        let (chosen, short) = select_cluster(&p, &out, 6.0, 1, &mut Rng::new(0)).unwrap();
        assert_eq!((chosen, short), (vec![1, 2, 3, 4], 2));
        let all_on = [1.0; 10];
        assert!(select_cluster(&p, &all_on, 1.0, 1, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn nonspecific_filters() {
        // Six neurons over 4 classes, 20 rows per class.
        // Active-row counts out of 20 per class.
        let counts: [[usize; 4]; 6] = [
            [10, 0, 0, 0], // class-specific, fails the cap
            [0, 0, 2, 0],  // entropy 0
            [2, 2, 2, 2],  // passes
            [3, 3, 2, 2],  // passes
            [2, 1, 0, 0],  // entropy too low
            [12, 12, 12, 0], // fails the cap
        ];
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for c in 0..4 {
            for r in 0..20 {
                rows.push((0..6).map(|j| if r < counts[j][c] { 1.0 } else { 0.0 }).collect::<Vec<f32>>());
                labels.push(c as u8);
            }
        }
        let p = profile_from(&rows, &labels, 4);
        assert_eq!(nonspecific_pool(&p, &[0, 1, 2, 3, 4, 5], 0.15, 0.30), vec![2, 3]);
    }

    #[test]
    fn interpolation_endpoints() {
        let a = [1.0f32, 2.0];
        let b = [3.0f32, -2.0];
        assert_eq!(interpolate(&[&a, &b], 0.0).unwrap(), a.to_vec());
        assert_eq!(interpolate(&[&a, &b], 0.5).unwrap(), vec![2.0, 0.0]);
        assert_eq!(interpolate(&[&a, &a], 0.3).unwrap(), a.to_vec());
        let latents = Tensor::matrix(3, 2, vec![0.0, 0.0, 1.0, 1.0, 2.0, 2.0]).unwrap();
        assert!(interpolation_latent(&latents, &[0, 0, 0], 2, None, &mut Rng::new(0)).is_err());
        let (z, rows) = interpolation_latent(&latents, &[0, 1, 1], 2, None, &mut Rng::new(0)).unwrap();
        assert_eq!(rows.len(), 2);
        assert_ne!(rows[0] == 0, rows[1] == 0);
        assert_eq!(z.len(), 2);
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
            assert_eq!(serde_json::to_value(m).unwrap(), serde_json::Value::String(m.as_str().into()));
        }
        assert!("creative".parse::<Method>().is_err());
    }

    #[test]
    fn validation() {
        assert!(Intervention::default().validate().is_ok());
        let bad = Intervention { kappa: [20.0, 10.0], ..Intervention::default() };
        assert!(bad.validate().is_err());
        let bad = Intervention { layer: 0, ..Intervention::default() };
        assert!(bad.validate().is_err());
    }
}

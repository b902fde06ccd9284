//! Surrogate novelty metrics for generated samples.

pub mod entropy;
pub mod fid;
pub mod filter;
pub mod knn;
pub mod ocsvm;
pub mod recon;
pub mod summary;

use std::collections::BTreeMap;

use crate::classifier::ClassifierModel;
use crate::config::MetricsConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vae::VaeModel;

use self::filter::FilterInput;
use self::knn::KnnIndex;
use self::ocsvm::OneClassSvm;

/// Per-sample metric values keyed by stable names (see the `key_*` helpers).
pub type NoveltyReport = BTreeMap<String, f64>;

pub const REGEN_DIST: &str = "regen_dist";
pub const OC_SCORE: &str = "oc_score";
pub const OC_SCORE_LIBSVM: &str = "oc_score_libsvm";

pub fn key_input_knn(k: usize) -> String {
    format!("input_{k}nn_norm")
}

pub fn key_latent_knn(k: usize) -> String {
    format!("latent_{k}nn_norm")
}

pub fn key_ice(classifier: &str) -> String {
    format!("ice_{classifier}")
}

/// Filter inputs from a report, using the named classifier's entropy.
pub fn filter_input(report: &NoveltyReport, classifier: &str) -> Result<FilterInput> {
    let get = |k: &str| {
        report
            .get(k)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("report lacks metric {k}")))
    };
    Ok(FilterInput {
        input_1nn: get(&key_input_knn(1))?,
        latent_1nn: get(&key_latent_knn(1))?,
        regen_dist: get(REGEN_DIST)?,
        ice: get(&key_ice(classifier))?,
    })
}

/// Reference structures shared by every sample scored against one training set.
pub struct Scorer<'a> {
    pub vae: &'a VaeModel,
    pub config: MetricsConfig,
    pub input_index: KnnIndex,
    pub latent_index: KnnIndex,
    pub classifiers: Vec<(String, &'a ClassifierModel)>,
    pub svm: OneClassSvm,
}

impl<'a> Scorer<'a> {
    pub fn new(
        vae: &'a VaeModel,
        train_images: &Tensor,
        classifiers: Vec<(String, &'a ClassifierModel)>,
        config: MetricsConfig,
        seed: u64,
    ) -> Result<Self> {
        let latents = encode_means(vae, train_images)?;
        let svm = OneClassSvm::train_subsample(
            &latents,
            config.ocsvm_gamma,
            config.ocsvm_nu,
            config.ocsvm_train_size,
            seed,
        )?;
        Ok(Self {
            vae,
            input_index: KnnIndex::new(train_images.clone()),
            latent_index: KnnIndex::new(latents),
            classifiers,
            svm,
            config,
        })
    }

    /// Every per-sample metric for the image rows of `images`.
    pub fn score(&self, images: &Tensor) -> Result<Vec<NoveltyReport>> {
        let n = images.rows();
        let mut reports = vec![NoveltyReport::new(); n];
        let put = |reports: &mut Vec<NoveltyReport>, key: &str, vals: &[f64]| {
            for (r, &v) in reports.iter_mut().zip(vals) {
                r.insert(key.to_string(), v);
            }
        };
        let dr = recon::reconstruction_distance(self.vae, images, self.config.recon_steps, self.config.recon_lr)?;
        put(&mut reports, REGEN_DIST, &dr.iter().map(|&v| v as f64).collect::<Vec<_>>());
        let latents = encode_means(self.vae, images)?;
        for &k in &self.config.knn_ks {
            put(&mut reports, &key_input_knn(k), &self.input_index.novelty(images, k)?);
            put(&mut reports, &key_latent_knn(k), &self.latent_index.novelty(&latents, k)?);
        }
        for (name, clf) in &self.classifiers {
            let proba = clf.predict_proba(images)?;
            put(&mut reports, &key_ice(name), &entropy::ice(&proba));
        }
        let oc = self.svm.decision_rows(&latents);
        put(&mut reports, OC_SCORE, &oc);
        let scale = self.svm.libsvm_scale();
        put(&mut reports, OC_SCORE_LIBSVM, &oc.iter().map(|v| v * scale).collect::<Vec<_>>());
        Ok(reports)
    }
}

pub fn encode_means(vae: &VaeModel, images: &Tensor) -> Result<Tensor> {
    let mut rows = Vec::with_capacity(images.rows() * vae.z_dim);
    let mut start = 0;
    while start < images.rows() {
        let end = (start + 4096).min(images.rows());
        let (mu, _) = vae.encode(&images.slice_rows(start, end))?;
        rows.extend_from_slice(mu.data());
        start = end;
    }
    Tensor::matrix(images.rows(), vae.z_dim, rows)
}

/// Batch-level scores of one classifier: Inception-style score and FID
/// against a reference batch of real images.
pub fn batch_scores(clf: &ClassifierModel, generated: &Tensor, real: &Tensor) -> Result<(f64, f64)> {
    let gen_pred = clf.predict(generated)?;
    let is = entropy::inception_style_score(&gen_pred.proba)?;
    let real_emb = clf.embed(real)?;
    let fid = fid::fid(&real_emb, &gen_pred.embedding)?;
    Ok((is, fid))
}

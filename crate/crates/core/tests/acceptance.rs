//! Headline reproduction checks on the trained MNIST and Fashion-MNIST models.
//!
//! Prints one `[PASS]` or `[FAIL]` line per criterion followed by the measured
//! values, and exits nonzero if any criterion fails. Models are read from
//! `$CREADEC_ARTIFACTS/{mnist,fashion}` (default `artifacts/` at the workspace
//! root) and trained there with the reference settings when missing. Data is
//! read from `$CREADEC_DATA` (default `data/`).

mod common;

use std::path::{Path, PathBuf};
use std::time::Instant;

use common::*;
use creadec::atlas::{off_on_sets, profile_decoder, Atlas};
use creadec::checkpoint;
use creadec::classifier::ClassifierModel;
use creadec::config::{DatasetName, RunConfig};
use creadec::data::DataSplits;
use creadec::evaluation::fleiss::fleiss_kappa_counts;
use creadec::evaluation::stats::categorical_tests;
use creadec::generate::{sample_images, Generator, InterpolationPool};
use creadec::intervention::{decode_with_intervention, Intervention, Method};
use creadec::metrics::encode_means;
use creadec::metrics::entropy::{entropy_bits, inception_style_score};
use creadec::metrics::fid::fid;
use creadec::metrics::knn::KnnIndex;
use creadec::metrics::ocsvm::OneClassSvm;
use creadec::metrics::recon::{reconstruction_distance, DEFAULT_LR, DEFAULT_STEPS};
use creadec::train;
use creadec::vae::VaeModel;
use creadec::{Rng, Tensor};
use statrs::distribution::{ChiSquared, ContinuousCDF};

const SAMPLES: usize = 2000;
const GEN_SEED: u64 = 1;
const REFERENCE_EPOCHS: usize = 30;

#[derive(Default)]
struct Report {
    failed: Vec<String>,
    passed: usize,
}

impl Report {
    fn criterion(&mut self, name: &str, checks: &[(bool, String)]) {
        let ok = checks.iter().all(|(p, _)| *p);
        println!("[{}] {name}", if ok { "PASS" } else { "FAIL" });
        for (p, line) in checks {
            println!("    {} {line}", if *p { "ok  " } else { "FAIL" });
        }
        if ok {
            self.passed += 1;
        } else {
            self.failed.push(name.to_string());
        }
    }
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn dir_from_env(var: &str, default: &str) -> PathBuf {
    std::env::var_os(var).map(PathBuf::from).unwrap_or_else(|| workspace_root().join(default))
}

fn reference_config(dataset: DatasetName, data: &Path, out: &Path) -> RunConfig {
    let mut cfg = RunConfig::new(dataset, data, out);
    cfg.vae.epochs = REFERENCE_EPOCHS;
    cfg.classifier.epochs = REFERENCE_EPOCHS;
    cfg.vae.verbose = true;
    cfg.classifier.verbose = true;
    cfg
}

fn ensure_vae(cfg: &RunConfig, splits: &DataSplits) -> VaeModel {
    let path = cfg.vae_path();
    if path.exists() {
        return checkpoint::load_vae(&path, None).expect("readable VAE checkpoint").0;
    }
    eprintln!("training VAE into {} ({REFERENCE_EPOCHS} epochs)", path.display());
    std::fs::create_dir_all(&cfg.output_dir).unwrap();
    let mut vae = VaeModel::new(cfg.z_dim(), &mut Rng::new(cfg.seed)).unwrap();
    train::train_vae(&mut vae, &splits.train, &splits.val, &cfg.vae).unwrap();
    checkpoint::save_vae(&path, &vae, &serde_json::to_value(cfg).unwrap()).unwrap();
    vae
}

fn ensure_classifier(cfg: &RunConfig, splits: &DataSplits) -> ClassifierModel {
    let path = cfg.classifier_path();
    if path.exists() {
        return checkpoint::load_classifier(&path, None).expect("readable classifier checkpoint").0;
    }
    eprintln!("training classifier into {} ({REFERENCE_EPOCHS} epochs)", path.display());
    std::fs::create_dir_all(&cfg.output_dir).unwrap();
    let mut clf = ClassifierModel::new(&mut Rng::new(cfg.seed)).unwrap();
    train::train_classifier(&mut clf, &splits.train, &splits.val, &cfg.classifier).unwrap();
    checkpoint::save_classifier(&path, &clf, &serde_json::to_value(cfg).unwrap()).unwrap();
    clf
}

fn ensure_atlas(cfg: &RunConfig, vae: &VaeModel, splits: &DataSplits, latents: &Tensor) -> Atlas {
    let path = cfg.profile_path();
    if path.exists() {
        return Atlas::load(&path).expect("readable profile");
    }
    eprintln!("profiling decoder into {}", path.display());
    let (labels, classes) = splits.train.stat_labels();
    let layers: Vec<usize> = (1..=vae.decoder_hidden_layers()).collect();
    let mut atlas = Atlas {
        layers: profile_decoder(vae, latents, &labels, classes, &layers, cfg.profile.tau).unwrap(),
    };
    atlas.cluster(cfg.profile.clusters, cfg.profile.cluster_seed).unwrap();
    atlas.save(&path).unwrap();
    atlas
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let m = mean(v);
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt())
}

struct Decodes {
    images: Tensor,
    dr: f64,
    shortfall: usize,
}

fn run_method(gen: &Generator, iv: Intervention) -> Decodes {
    let samples = gen.generate(&iv, SAMPLES, GEN_SEED, "acc").unwrap();
    let shortfall = samples.iter().map(|s| s.record.flips.shortfall).sum();
    let images = sample_images(&samples).unwrap();
    let d = reconstruction_distance(gen.vae, &images, DEFAULT_STEPS, DEFAULT_LR).unwrap();
    let dr = mean(&d.iter().map(|&v| v as f64).collect::<Vec<_>>());
    Decodes { images, dr, shortfall }
}

fn flips(method: Method, rho: f64) -> Intervention {
    Intervention {
        rho,
        layer: 3,
        ..Intervention::new(method)
    }
}

fn within(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * b.abs()
}

fn main() {
    let started = Instant::now();
    let data = dir_from_env("CREADEC_DATA", "data");
    let artifacts = dir_from_env("CREADEC_ARTIFACTS", "artifacts");
    let mut report = Report::default();

    let mnist_cfg = reference_config(DatasetName::Mnist, &data, &artifacts.join("mnist"));
    let fashion_cfg = reference_config(DatasetName::Fashion, &data, &artifacts.join("fashion"));
    let mnist = DatasetName::Mnist
        .load(&data)
        .unwrap_or_else(|e| panic!("MNIST not found under {}: {e}", data.display()));
    let vae = ensure_vae(&mnist_cfg, &mnist);
    let clf = ensure_classifier(&mnist_cfg, &mnist);
    let train_latents = encode_means(&vae, &mnist.train.images).unwrap();
    let atlas = ensure_atlas(&mnist_cfg, &vae, &mnist, &train_latents);

    // VAE loss on the test split.
    let t = vae.evaluate(&mnist.test.images, 1.0, mnist_cfg.seed + 1).unwrap();
    report.criterion(
        "vae-elbo: MNIST test loss in [95, 135], KL in [8, 20], <= 125 for the 30-epoch profile",
        &[
            ((95.0..=135.0).contains(&t.total), format!("total {:.2} (paper 110.0)", t.total)),
            ((8.0..=20.0).contains(&t.kl), format!("kl {:.2}, nll {:.2} (paper 13.7, 96.3)", t.kl, t.nll)),
            (t.total <= 125.0, format!("{REFERENCE_EPOCHS}-epoch profile total {:.2} <= 125", t.total)),
        ],
    );

    // Classifier accuracy.
    let mnist_acc = clf.accuracy(&mnist.test.images, &mnist.test.labels).unwrap();
    let fashion_check = match DatasetName::Fashion.load(&data) {
        Ok(fashion) => {
            let fclf = ensure_classifier(&fashion_cfg, &fashion);
            let acc = fclf.accuracy(&fashion.test.images, &fashion.test.labels).unwrap();
            (acc >= 0.87, format!("FMNIST test accuracy {acc:.4} >= 0.87"))
        }
        Err(e) => (false, format!("FMNIST unavailable: {e}")),
    };
    report.criterion(
        "classifier: MNIST accuracy >= 0.97 and FMNIST >= 0.87",
        &[(mnist_acc >= 0.97, format!("MNIST test accuracy {mnist_acc:.4} >= 0.97")), fashion_check],
    );

    // Dead neurons and off-set sizes.
    let dead: Vec<usize> = (1..=3).map(|k| atlas.layer(k).unwrap().dead_count()).collect();
    let mut rng = Rng::new(GEN_SEED).fork(7);
    let (prior, _) = vae.sample_prior(1000, &mut rng).unwrap();
    let off_sizes = |k: usize| -> (f64, f64) {
        let h = vae.decoder.eval_range(0..k, &prior).unwrap();
        let profile = atlas.layer(k).unwrap();
        let sizes: Vec<f64> = (0..h.rows()).map(|r| off_on_sets(profile, h.row(r)).off.len() as f64).collect();
        mean_std(&sizes)
    };
    let (off2, off2_sd) = off_sizes(2);
    let (off3, off3_sd) = off_sizes(3);
    let widths: Vec<usize> = (1..=3).map(|k| atlas.layer(k).unwrap().width()).collect();
    report.criterion(
        "dead-neurons: layer 1 has 0 dead, layers 2-3 in [50, 250], mean layer-2 off set in [700, 880]",
        &[
            (dead[0] == 0, format!("layer 1 dead {} of {}", dead[0], widths[0])),
            ((50..=250).contains(&dead[1]), format!("layer 2 dead {} of {} (paper 132)", dead[1], widths[1])),
            ((50..=250).contains(&dead[2]), format!("layer 3 dead {} of {} (paper 127)", dead[2], widths[2])),
            (
                (700.0..=880.0).contains(&off2),
                format!("layer 2 off set {off2:.1} ± {off2_sd:.1} over 1000 prior draws, width {} (paper 792 ± 15)", widths[1]),
            ),
            (true, format!("layer 3 off set {off3:.1} ± {off3_sd:.1}, width {} (reported only)", widths[2])),
        ],
    );

    // Reconstruction-distance signature at layer 3 with 5 flips.
    let gen = Generator {
        vae: &vae,
        atlas: Some(&atlas),
        pool: Some(InterpolationPool {
            latents: &train_latents,
            labels: &mnist.train.labels,
        }),
    };
    let regular = run_method(&gen, Intervention::new(Method::Regular));
    let low5 = run_method(&gen, flips(Method::LowActive, 5.0));
    let random = run_method(&gen, flips(Method::RandomFlip, 5.0));
    let noisy = run_method(&gen, Intervention::new(Method::Noisy));
    report.criterion(
        "dr-signature: low-active >= 2x regular, low-active > random-flip > noisy, noisy within 35% of regular",
        &[
            (
                low5.dr >= 2.0 * regular.dr,
                format!("low-active {:.3} >= 2 x regular {:.3} (paper 4.87, 1.45)", low5.dr, regular.dr),
            ),
            (low5.dr > random.dr, format!("low-active {:.3} > random-flip {:.3} (paper 4.21)", low5.dr, random.dr)),
            (random.dr > noisy.dr, format!("random-flip {:.3} > noisy {:.3} (paper 1.78)", random.dr, noisy.dr)),
            (
                within(noisy.dr, regular.dr, 0.35),
                format!("noisy {:.3} within 35% of regular {:.3}", noisy.dr, regular.dr),
            ),
            (
                true,
                format!(
                    "{SAMPLES} samples per method; flip shortfall low-active {} random-flip {}",
                    low5.shortfall, random.shortfall
                ),
            ),
        ],
    );

    // Trend over flip counts and the interpolation baseline.
    let low1 = run_method(&gen, flips(Method::LowActive, 1.0));
    let low10 = run_method(&gen, flips(Method::LowActive, 10.0));
    let interp = run_method(&gen, Intervention::new(Method::Interpolation));
    report.criterion(
        "dr-trend: low-active nondecreasing over 1, 5, 10 flips; 2-point interpolation within 50% of regular",
        &[
            (
                low1.dr <= low5.dr && low5.dr <= low10.dr,
                format!("{:.3} -> {:.3} -> {:.3} (paper 3.08 -> 4.87 -> 5.15)", low1.dr, low5.dr, low10.dr),
            ),
            (
                within(interp.dr, regular.dr, 0.5),
                format!("interpolation {:.3} vs regular {:.3} (paper 1.48 vs 1.45)", interp.dr, regular.dr),
            ),
        ],
    );

    // Metric oracles.
    let mut rng = Rng::new(31);
    let refs = Tensor::matrix(500, 8, (0..4000).map(|_| rng.normal()).collect()).unwrap();
    let queries = Tensor::matrix(1000, 8, (0..8000).map(|_| 1.2 * rng.normal()).collect()).unwrap();
    let index = KnnIndex::new(refs.clone());
    let knn_ok = [1, 5].iter().all(|&k| index.novelty(&queries, k).unwrap() == knn_novelty_brute(&refs, &queries, k));
    let q = random_rotation(5, &mut rng);
    let (mu1, var1) = (vec![0.0; 5], vec![1.0, 2.0, 0.5, 1.5, 3.0]);
    let (mu2, var2) = (vec![1.0, -0.5, 0.0, 2.0, 0.5], vec![2.0, 1.0, 1.0, 0.3, 1.0]);
    let a = rotated_gaussian(40_000, &mu1, &var1, &q, &mut rng);
    let b = rotated_gaussian(40_000, &mu2, &var2, &q, &mut rng);
    let want = frechet_commuting(&mu1, &var1, &mu2, &var2);
    let got = fid(&a, &b).unwrap();
    let self_fid = fid(&a, &a).unwrap();
    let mut one_hot = [0f32; 10];
    one_hot[3] = 1.0;
    let (ice0, ice_max) = (entropy_bits(&one_hot), entropy_bits(&[0.1; 10]));
    let (enc_err, dec_err) = vae_gradient_errors(1);
    let clf_err = classifier_gradient_error(2);
    let grad_err = enc_err.max(dec_err).max(clf_err);
    let mut idx = Rng::new(GEN_SEED).fork(9).sample_indices(train_latents.rows(), 3000);
    idx.sort_unstable();
    let svm_train = train_latents.select_rows(&idx);
    let svm = OneClassSvm::train(&svm_train, 0.1, 0.15).unwrap();
    let outliers = svm.decision_rows(&svm_train).iter().filter(|&&d| d < 0.0).count() as f64 / 3000.0;
    report.criterion(
        "metric-oracles: kNS, FID, ICE endpoints, gradients, one-class SVM outlier fraction",
        &[
            (knn_ok, "kNS (k = 1, 5) equals exhaustive search on 1000 queries".to_string()),
            ((got - want).abs() / want < 0.02, format!("FID {got:.4} vs closed form {want:.4} (5-D Gaussians)")),
            (self_fid.abs() < 1e-6, format!("fid(A, A) = {self_fid:.2e}")),
            (
                ice0 == 0.0 && (ice_max - 10f64.log2()).abs() < 1e-12,
                format!("ICE one-hot {ice0}, uniform {ice_max:.15} vs log2(10) {:.15}", 10f64.log2()),
            ),
            (
                grad_err < 1e-3,
                format!("gradient rel. error encoder {enc_err:.2e}, decoder {dec_err:.2e}, classifier {clf_err:.2e}"),
            ),
            (
                (0.10..=0.20).contains(&outliers),
                format!("one-class SVM training outliers {outliers:.3} at nu = 0.15 (3000 MNIST latents)"),
            ),
        ],
    );

    // Inception-style score ordering.
    let is_test = inception_style_score(&clf.predict_proba(&mnist.test.images).unwrap()).unwrap();
    let is_low = inception_style_score(&clf.predict_proba(&low5.images).unwrap()).unwrap();
    let mut rng = Rng::new(GEN_SEED).fork(11);
    let noise = Tensor::matrix(SAMPLES, 784, (0..SAMPLES * 784).map(|_| rng.uniform()).collect()).unwrap();
    let is_noise = inception_style_score(&clf.predict_proba(&noise).unwrap()).unwrap();
    report.criterion(
        "inception-order: test images > low-active decodes > uniform noise, gaps >= 0.5",
        &[
            (is_test - is_low >= 0.5, format!("test {is_test:.3} vs low-active {is_low:.3} (paper 9.9 vs 7-8)")),
            (is_low - is_noise >= 0.5, format!("low-active {is_low:.3} vs noise {is_noise:.3} (paper 2.9)")),
        ],
    );

    // Statistics and the identity intervention.
    let example = fleiss_worked_example();
    let kappa = fleiss_kappa_counts(&example).unwrap();
    let kappa_ref = fleiss_ref(&example);
    let tables: [([f64; 4], [f64; 4]); 3] = [
        ([39.0, 50.0, 11.0, 1.0], [8.0, 30.0, 60.0, 2.0]),
        ([12.0, 30.0, 8.0, 1.0], [20.0, 15.0, 14.0, 2.0]),
        ([25.0, 25.0, 25.0, 25.0], [24.0, 27.0, 23.0, 26.0]),
    ];
    let df3 = ChiSquared::new(3.0).unwrap();
    let mut p_err: f64 = 0.0;
    for (x, y) in &tables {
        let t = categorical_tests(x, y).unwrap();
        p_err = p_err.max((t.chi2_p - df3.sf(t.chi2)).abs()).max((t.g_p - df3.sf(t.g)).abs());
    }
    let mut rng = Rng::new(GEN_SEED).fork(13);
    let (zs, _) = vae.sample_prior(200, &mut rng).unwrap();
    let plain = vae.decode(&zs).unwrap();
    let identities = [
        flips(Method::LowActive, 0.0),
        flips(Method::RandomFlip, 0.0),
        Intervention {
            noise_fraction: 0.0,
            ..Intervention::new(Method::Noisy)
        },
    ];
    let bit_exact = identities.iter().all(|iv| {
        (0..zs.rows()).all(|r| {
            let (img, _) = decode_with_intervention(&vae, zs.row(r), iv, &atlas).unwrap();
            img.iter().zip(plain.row(r)).all(|(a, b)| a.to_bits() == b.to_bits())
        })
    });
    report.criterion(
        "statistics: Fleiss worked example, chi-squared and G p-values, identity intervention",
        &[
            (
                (kappa - 0.210).abs() <= 1e-3 && (kappa - kappa_ref).abs() < 1e-12,
                format!("kappa {kappa:.5} (reference formula {kappa_ref:.5}, expected 0.210)"),
            ),
            (p_err < 1e-4, format!("max |p - statrs| {p_err:.2e} over chi-squared and G on 3 tables")),
            (bit_exact, "identity interventions decode bit-exactly like regular decoding (200 latents)".to_string()),
        ],
    );

    println!(
        "\n{} of {} criteria passed in {:.0}s",
        report.passed,
        report.passed + report.failed.len(),
        started.elapsed().as_secs_f64()
    );
    if !report.failed.is_empty() {
        println!("failed: {}", report.failed.join(", "));
        std::process::exit(1);
    }
}

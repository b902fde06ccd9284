//! Subcommand implementations.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use creadec::atlas::{profile_decoder, Atlas};
use creadec::checkpoint;
use creadec::classifier::ClassifierModel;
use creadec::config::{write_json, DatasetName, Manifest, RunConfig};
use creadec::evaluation::{
    self, categorical_tests, consensus, fleiss_kappa, fraction_table, latest_per_annotator, read_annotations,
    train_creativity_classifier, ConsensusRule, Label,
};
use creadec::generate::{sample_images, sample_seed, Generator, InterpolationPool};
use creadec::metrics::entropy::ice;
use creadec::metrics::filter::FilterThresholds;
use creadec::metrics::summary::{write_csv, SummaryRow};
use creadec::metrics::{self, batch_scores, encode_means, Scorer, OC_SCORE_LIBSVM};
use creadec::store::SampleStore;
use creadec::train;
use creadec::vae::{VaeModel, IMAGE_DIM};
use creadec::{Rng, Tensor};
use serde_json::json;

use crate::cli::*;
use crate::service::{self, AppState};

/// Build the run configuration from an optional file plus flag overrides.
pub fn resolve(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load_file(path).with_context(|| format!("loading {}", path.display()))?,
        None => {
            let dataset = common.dataset.unwrap_or(DatasetName::Mnist);
            let data_dir = common.data_dir.clone().unwrap_or_else(|| PathBuf::from("data"));
            let out = common
                .out
                .clone()
                .unwrap_or_else(|| PathBuf::from("artifacts").join(dataset.as_str()));
            RunConfig::new(dataset, data_dir, out)
        }
    };
    if let Some(d) = common.dataset {
        if d != cfg.dataset {
            cfg.dataset = d;
            cfg.vae.nll_weight = d.nll_weight();
        }
    }
    if let Some(d) = &common.data_dir {
        cfg.data_dir = d.clone();
    }
    if let Some(o) = &common.out {
        cfg.output_dir = o.clone();
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
        cfg.vae.seed = s;
        cfg.classifier.seed = s;
    }
    Ok(cfg)
}

fn load_vae(cfg: &RunConfig) -> Result<VaeModel> {
    let path = cfg.vae_path();
    if !path.exists() {
        bail!("missing VAE checkpoint {} (run train-vae first)", path.display());
    }
    Ok(checkpoint::load_vae(&path, None)?.0)
}

fn load_classifier(cfg: &RunConfig) -> Result<ClassifierModel> {
    let path = cfg.classifier_path();
    if !path.exists() {
        bail!("missing classifier checkpoint {} (run train-classifier first)", path.display());
    }
    Ok(checkpoint::load_classifier(&path, None)?.0)
}

fn load_atlas(cfg: &RunConfig) -> Result<Atlas> {
    let path = cfg.profile_path();
    if !path.exists() {
        bail!("missing activation profile {} (run profile first)", path.display());
    }
    Ok(Atlas::load(&path)?)
}

fn names(paths: &[&Path]) -> Vec<String> {
    paths.iter().map(|p| p.display().to_string()).collect()
}

pub fn train_vae(args: &TrainArgs, argv: &[String]) -> Result<()> {
    let mut cfg = resolve(&args.common)?;
    if let Some(e) = args.epochs {
        cfg.vae.epochs = e;
    }
    if args.train_limit.is_some() {
        cfg.vae.train_limit = args.train_limit;
    }
    cfg.vae.verbose = !args.quiet;
    cfg.validate()?;
    let splits = cfg.dataset.load(&cfg.data_dir)?;
    let mut rng = Rng::new(cfg.seed);
    let mut vae = VaeModel::new(cfg.z_dim(), &mut rng)?;
    let mut report = train::train_vae(&mut vae, &splits.train, &splits.val, &cfg.vae)?;
    let test = vae.evaluate(&splits.test.images, cfg.vae.nll_weight, cfg.seed.wrapping_add(1))?;
    report.test = Some(test);
    let ckpt = cfg.vae_path();
    let report_path = cfg.output_dir.join("vae_report.json");
    checkpoint::save_vae(&ckpt, &vae, &serde_json::to_value(&cfg)?)?;
    write_json(&report_path, &report)?;
    Manifest::new("train-vae", argv.to_vec(), &cfg, names(&[&ckpt, &report_path])).write(&cfg.output_dir, true)?;
    println!(
        "test loss {:.3} (nll {:.3}, kl {:.3}) after {} epochs in {:.0}s",
        test.total,
        test.nll,
        test.kl,
        report.history.len(),
        report.seconds
    );
    Ok(())
}

pub fn train_classifier(args: &TrainArgs, argv: &[String]) -> Result<()> {
    let mut cfg = resolve(&args.common)?;
    if let Some(e) = args.epochs {
        cfg.classifier.epochs = e;
    }
    if args.train_limit.is_some() {
        cfg.classifier.train_limit = args.train_limit;
    }
    cfg.classifier.verbose = !args.quiet;
    cfg.validate()?;
    let splits = cfg.dataset.load(&cfg.data_dir)?;
    let mut rng = Rng::new(cfg.seed);
    let mut clf = ClassifierModel::new(&mut rng)?;
    let mut report = train::train_classifier(&mut clf, &splits.train, &splits.val, &cfg.classifier)?;
    let acc = clf.accuracy(&splits.test.images, &splits.test.labels)?;
    report.test_accuracy = Some(acc);
    let ckpt = cfg.classifier_path();
    let report_path = cfg.output_dir.join("classifier_report.json");
    checkpoint::save_classifier(&ckpt, &clf, &serde_json::to_value(&cfg)?)?;
    write_json(&report_path, &report)?;
    Manifest::new("train-classifier", argv.to_vec(), &cfg, names(&[&ckpt, &report_path]))
        .write(&cfg.output_dir, true)?;
    println!("test accuracy {acc:.4}");
    Ok(())
}

pub fn profile(args: &ProfileArgs, argv: &[String]) -> Result<()> {
    let mut cfg = resolve(&args.common)?;
    if let Some(c) = args.clusters {
        cfg.profile.clusters = c;
    }
    cfg.validate()?;
    let vae = load_vae(&cfg)?;
    let splits = cfg.dataset.load(&cfg.data_dir)?;
    let train = match args.limit {
        Some(n) => splits.train.head(n),
        None => splits.train,
    };
    let latents = encode_means(&vae, &train.images)?;
    let (labels, classes) = train.stat_labels();
    let layers: Vec<usize> = (1..=vae.decoder_hidden_layers()).collect();
    let mut atlas = Atlas {
        layers: profile_decoder(&vae, &latents, &labels, classes, &layers, cfg.profile.tau)?,
    };
    atlas.cluster(cfg.profile.clusters, cfg.profile.cluster_seed)?;
    let path = cfg.profile_path();
    let summary_path = cfg.output_dir.join("profile_summary.json");
    atlas.save(&path)?;
    let summary = atlas.summary();
    write_json(&summary_path, &summary)?;
    Manifest::new("profile", argv.to_vec(), &cfg, names(&[&path, &summary_path])).write(&cfg.output_dir, true)?;
    let dead: Vec<usize> = summary.layers.iter().map(|l| l.dead).collect();
    println!("profiled {} samples; dead neurons per layer {dead:?}", train.len());
    Ok(())
}

/// Opaque id prefix that does not reveal the method to annotators.
fn default_prefix(cfg: &RunConfig) -> Result<String> {
    let text = serde_json::to_string(&cfg.intervention)?;
    let h = text.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
    Ok(format!("{:08x}", sample_seed(h, cfg.seed, 0) >> 32))
}

pub fn generate(args: &GenerateArgs, argv: &[String]) -> Result<()> {
    let mut cfg = resolve(&args.common)?;
    args.intervention.apply(&mut cfg.intervention);
    cfg.validate()?;
    let iv = cfg.intervention.clone();
    let vae = load_vae(&cfg)?;
    let atlas = if iv.method.is_layer_method() && !iv.is_identity() {
        Some(load_atlas(&cfg)?)
    } else {
        None
    };
    let pool_data = if iv.method == creadec::intervention::Method::Interpolation {
        let splits = cfg.dataset.load(&cfg.data_dir)?;
        Some((encode_means(&vae, &splits.train.images)?, splits.train.labels))
    } else {
        None
    };
    let generator = Generator {
        vae: &vae,
        atlas: atlas.as_ref(),
        pool: pool_data.as_ref().map(|(latents, labels)| InterpolationPool { latents, labels }),
    };
    let prefix = match &args.prefix {
        Some(p) => p.clone(),
        None => default_prefix(&cfg)?,
    };
    let samples = generator.generate(&iv, args.n, cfg.seed, &prefix)?;
    let dir = args
        .samples
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join("samples").join(iv.method.as_str()));
    let store = SampleStore::open(&dir)?;
    store.save(&samples)?;
    let shortfall: usize = samples.iter().map(|s| s.record.flips.shortfall).sum();
    Manifest::new("generate", argv.to_vec(), &cfg, names(&[&dir])).write(&dir, true)?;
    println!("wrote {} {} samples to {}", samples.len(), iv.method, dir.display());
    if shortfall > 0 {
        eprintln!("warning: {shortfall} requested flips could not be made (pool too small)");
    }
    Ok(())
}

pub fn metrics(args: &MetricsArgs, argv: &[String]) -> Result<()> {
    let mut cfg = resolve(&args.common)?;
    if let Some(s) = args.recon_steps {
        cfg.metrics.recon_steps = s;
    }
    if let Some(lr) = args.recon_lr {
        cfg.metrics.recon_lr = lr;
    }
    if let Some(n) = args.ocsvm_train_size {
        cfg.metrics.ocsvm_train_size = n;
    }
    cfg.validate()?;
    let vae = load_vae(&cfg)?;
    let clf = if args.no_classifier { None } else { Some(load_classifier(&cfg)?) };
    let splits = cfg.dataset.load(&cfg.data_dir)?;
    let train_images = match args.train_limit {
        Some(n) => splits.train.head(n).images,
        None => splits.train.images,
    };
    let clf_name = cfg.dataset.as_str().to_string();
    let classifiers: Vec<(String, &ClassifierModel)> = clf.iter().map(|c| (clf_name.clone(), c)).collect();
    let scorer = Scorer::new(&vae, &train_images, classifiers, cfg.metrics.clone(), cfg.seed)?;
    let mut rows = Vec::new();
    for dir in &args.samples {
        let store = SampleStore::open(dir)?;
        let samples = store.load()?;
        if samples.is_empty() {
            bail!("sample store {} is empty", dir.display());
        }
        let images = sample_images(&samples)?;
        let reports = scorer.score(&images)?;
        let mut records: Vec<_> = samples.iter().map(|s| s.record.clone()).collect();
        for (r, rep) in records.iter_mut().zip(&reports) {
            r.metrics = rep.clone();
        }
        store.rewrite_records(&records)?;
        let iv = &records[0].intervention;
        let mut extra = BTreeMap::new();
        if let Some(c) = &clf {
            if samples.len() >= metrics::entropy::MIN_INCEPTION_SAMPLES {
                let (is, fid) = batch_scores(c, &images, &splits.test.images)?;
                extra.insert(format!("inception_score_{clf_name}"), is);
                extra.insert(format!("fid_{clf_name}"), fid);
            }
        }
        let num_turn_on = if iv.method.is_layer_method() { iv.rho } else { 0.0 };
        rows.push(SummaryRow::from_reports(iv.method.as_str(), num_turn_on, &reports, &extra));
        let mut m = Manifest::new("metrics", argv.to_vec(), &cfg, names(&[dir]));
        m.config.intervention = iv.clone();
        m.write(dir, true)?;
        println!(
            "{}: {} samples, mean regen_dist {:.4}",
            dir.display(),
            samples.len(),
            rows.last().unwrap().values.get("regen_dist_mean").copied().unwrap_or(f64::NAN)
        );
    }
    let summary = args.summary.clone().unwrap_or_else(|| cfg.output_dir.join("metrics_summary.csv"));
    write_csv(&summary, &rows)?;
    let dir = summary.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    Manifest::new("metrics", argv.to_vec(), &cfg, names(&[&summary])).write(dir, true)?;
    println!("summary written to {}", summary.display());
    Ok(())
}

const NOISE_IMAGES: usize = 1000;

pub fn filter(args: &FilterArgs, argv: &[String]) -> Result<()> {
    let cfg = resolve(&args.common)?;
    cfg.validate()?;
    let clf_name = args.classifier.clone().unwrap_or_else(|| cfg.dataset.as_str().to_string());
    let (ice_low, ice_high) = match (args.ice_low, args.ice_high) {
        (Some(l), Some(h)) => (l, h),
        (l, h) => {
            let clf = load_classifier(&cfg)?;
            let mean = |x: &Tensor| -> Result<f64> {
                let v = ice(&clf.predict_proba(x)?);
                Ok(v.iter().sum::<f64>() / v.len() as f64)
            };
            let low = match l {
                Some(l) => l,
                None => mean(&cfg.dataset.load(&cfg.data_dir)?.test.images)?,
            };
            let high = match h {
                Some(h) => h,
                None => {
                    let mut rng = Rng::new(cfg.seed).fork(3);
                    let noise: Vec<f32> = (0..NOISE_IMAGES * IMAGE_DIM).map(|_| rng.uniform()).collect();
                    mean(&Tensor::matrix(NOISE_IMAGES, IMAGE_DIM, noise)?)?
                }
            };
            (low, high)
        }
    };
    let inputs = |dir: &Path| -> Result<Vec<(String, metrics::filter::FilterInput)>> {
        SampleStore::open(dir)?
            .load_records()?
            .into_iter()
            .map(|r| {
                let f = metrics::filter_input(&r.metrics, &clf_name)
                    .with_context(|| format!("sample {} in {} (run metrics first)", r.id, dir.display()))?;
                Ok((r.id, f))
            })
            .collect()
    };
    let calibration: Vec<_> = inputs(&args.calibration)?.into_iter().map(|(_, f)| f).collect();
    let thresholds = FilterThresholds::calibrate(&calibration, ice_low, ice_high)?;
    let candidates = inputs(&args.samples)?;
    let passed: Vec<&String> = candidates.iter().filter(|(_, f)| thresholds.passes(f)).map(|(id, _)| id).collect();
    let out = args.samples.join("filter.json");
    write_json(
        &out,
        &json!({
            "classifier": clf_name,
            "thresholds": thresholds,
            "n": candidates.len(),
            "passed": passed,
            "pass_fraction": passed.len() as f64 / candidates.len().max(1) as f64,
        }),
    )?;
    Manifest::new("filter", argv.to_vec(), &cfg, names(&[&out])).write(&args.samples, true)?;
    println!("{} of {} samples pass the filter", passed.len(), candidates.len());
    Ok(())
}

/// Method tag and metrics of every sample in the given stores.
fn store_metadata(stores: &[PathBuf]) -> Result<BTreeMap<String, (String, BTreeMap<String, f64>)>> {
    let mut out = BTreeMap::new();
    for dir in stores {
        for r in SampleStore::open(dir)?.load_records()? {
            if out.insert(r.id.clone(), (r.intervention.method.as_str().to_string(), r.metrics)).is_some() {
                bail!("sample id {} appears in more than one store", r.id);
            }
        }
    }
    Ok(out)
}

pub fn evaluate(args: &EvaluateArgs, argv: &[String]) -> Result<()> {
    let cfg = resolve(&args.common)?;
    let records = read_annotations(&args.annotations)?;
    let meta = store_metadata(&args.samples)?;
    let mut methods: BTreeMap<String, String> = meta.iter().map(|(id, (m, _))| (id.clone(), m.clone())).collect();
    for r in &records {
        if let Some(m) = &r.method {
            match methods.get(&r.sample_id) {
                Some(prev) if prev != m => bail!("sample {} is tagged both {prev} and {m}", r.sample_id),
                _ => {
                    methods.insert(r.sample_id.clone(), m.clone());
                }
            }
        }
    }
    let regen: BTreeMap<String, f64> = meta
        .iter()
        .filter_map(|(id, (_, m))| m.get(metrics::REGEN_DIST).map(|&v| (id.clone(), v)))
        .collect();
    let rule = if args.majority {
        ConsensusRule::Majority
    } else {
        ConsensusRule::Quorum(args.min_agree)
    };
    let labels = consensus(&records, rule).context("conflicting labels (export the log first to keep only the latest)")?;
    // Methods without any consensus label cannot form a row.
    let labeled: BTreeSet<&String> = labels
        .iter()
        .filter(|(_, l)| l.is_some())
        .filter_map(|(id, _)| methods.get(id))
        .collect();
    let dropped: BTreeSet<&String> = methods.values().filter(|m| !labeled.contains(m)).collect();
    for m in &dropped {
        eprintln!("warning: method {m} has no consensus-labeled samples; left out of the table");
    }
    let kept: BTreeMap<String, String> = methods
        .iter()
        .filter(|(_, m)| labeled.contains(m))
        .map(|(a, b)| (a.clone(), b.clone()))
        .collect();
    let table = fraction_table(&labels, &kept, &regen)?;

    let mut tests = Vec::new();
    for (i, a) in table.rows.iter().enumerate() {
        for b in &table.rows[i + 1..] {
            let counts = |r: &evaluation::TableRow| r.counts.map(|c| c as f64);
            let result = categorical_tests(&counts(a), &counts(b));
            tests.push(json!({
                "a": a.method,
                "b": b.method,
                "result": result.as_ref().ok(),
                "error": result.as_ref().err().map(|e| e.to_string()),
            }));
        }
    }
    let kappa = fleiss_kappa(&records);

    // Creative (L1) against not creative (L2, L3), on scored samples only.
    let mut feature_names: Option<BTreeSet<String>> = None;
    let mut rows = Vec::new();
    for (id, l) in &labels {
        let (Some(l), Some((_, m))) = (l, meta.get(id)) else { continue };
        if *l == Label::Inconclusive || m.is_empty() {
            continue;
        }
        let keys: BTreeSet<String> = m.keys().filter(|k| k.as_str() != OC_SCORE_LIBSVM).cloned().collect();
        feature_names = Some(match feature_names {
            Some(prev) => prev.intersection(&keys).cloned().collect(),
            None => keys,
        });
        rows.push((m, *l == Label::Creative));
    }
    let creativity = match feature_names {
        Some(names) if !names.is_empty() => {
            let names: Vec<String> = names.into_iter().collect();
            let (x, y): (Vec<Vec<f64>>, Vec<bool>) = rows
                .iter()
                .map(|(m, c)| (names.iter().map(|k| m[k]).collect::<Vec<f64>>(), *c))
                .filter(|(r, _)| r.iter().all(|v| v.is_finite()))
                .unzip();
            match train_creativity_classifier(&x, &names, &y, &evaluation::logistic::LAMBDA_GRID, cfg.seed) {
                Ok(r) => json!(r),
                Err(e) => json!({ "error": e.to_string() }),
            }
        }
        _ => json!({ "error": "no scored samples with creative/not-creative consensus" }),
    };

    let out = args.eval_out.clone().unwrap_or_else(|| cfg.output_dir.join("evaluation"));
    std::fs::create_dir_all(&out)?;
    let table_path = out.join("table.csv");
    let json_path = out.join("evaluation.json");
    table.write_csv(&table_path)?;
    write_json(
        &json_path,
        &json!({
            "rule": rule,
            "records": records.len(),
            "samples_with_consensus": labels.values().filter(|l| l.is_some()).count(),
            "table": table,
            "tests": tests,
            "fleiss_kappa": kappa.as_ref().ok(),
            "fleiss_error": kappa.as_ref().err().map(|e| e.to_string()),
            "creativity_classifier": creativity,
        }),
    )?;
    Manifest::new("evaluate", argv.to_vec(), &cfg, names(&[&table_path, &json_path])).write(&out, true)?;
    for r in &table.rows {
        println!(
            "{:<16} L1 {:.3}  L2 {:.3}  L3 {:.3}  L4 {:.3}  regen_dist {:.3}  (n={})",
            r.method, r.fractions[0], r.fractions[1], r.fractions[2], r.fractions[3], r.mean_regen_dist, r.n_consensus()
        );
    }
    Ok(())
}

pub fn serve(args: &ServeArgs, argv: &[String]) -> Result<()> {
    let cfg = resolve(&args.common)?;
    let samples = service::load_samples(&args.samples)?;
    let priming = if args.priming > 0 {
        let train = cfg.dataset.load(&cfg.data_dir)?.train;
        let mut rng = Rng::new(cfg.seed).fork(5);
        rng.sample_indices(train.len(), args.priming.min(train.len()))
            .into_iter()
            .map(|i| train.images.row(i).iter().map(|&v| creadec::data::quantize(v)).collect())
            .collect()
    } else {
        Vec::new()
    };
    let log = args.annotations.clone().unwrap_or_else(|| cfg.output_dir.join("annotations.jsonl"));
    let state = Arc::new(AppState::new(samples, priming, &log, cfg.seed)?);
    if let Some(dir) = log.parent().filter(|p| !p.as_os_str().is_empty()) {
        Manifest::new("serve-annotation", argv.to_vec(), &cfg, names(&[&log])).write(dir, true)?;
    }
    let app = service::router(state, args.cors_origin.as_deref())?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind((args.addr.as_str(), args.port)).await?;
        println!("annotation service listening on http://{}", listener.local_addr()?);
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}

pub fn export(args: &ExportArgs, argv: &[String]) -> Result<()> {
    let cfg = resolve(&args.common)?;
    let mut records = latest_per_annotator(&read_annotations(&args.annotations)?);
    match args.role {
        Role::Annotator => records.iter_mut().for_each(|r| r.method = None),
        Role::Evaluator => {
            if args.samples.is_empty() {
                bail!("the evaluator export needs --samples to attach method tags");
            }
            let meta = store_metadata(&args.samples)?;
            for r in &mut records {
                let (m, _) = meta
                    .get(&r.sample_id)
                    .with_context(|| format!("sample {} is not in the given stores", r.sample_id))?;
                r.method = Some(m.clone());
            }
        }
    }
    let mut text = String::new();
    for r in &records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    match &args.output {
        Some(path) => {
            std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
            if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                Manifest::new("export", argv.to_vec(), &cfg, names(&[path])).write(dir, true)?;
            }
        }
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

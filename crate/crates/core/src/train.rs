//! Minibatch training loops for the VAE and the classifier.
//!
//! Both loops keep the best-validation parameters, restart from them after
//! `restart_patience` stagnant epochs, halve the step size after
//! `lr_patience` stagnant epochs and stop after `stop_patience`.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adam::{AdamConfig, AdamState};
use crate::classifier::ClassifierModel;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::rng::Rng;
use crate::vae::{ElboTerms, VaeModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Weight on the reconstruction term (VAE only).
    pub nll_weight: f32,
    pub restart_patience: usize,
    pub lr_patience: usize,
    pub stop_patience: usize,
    /// Use only the first `n` training records (quick runs).
    pub train_limit: Option<usize>,
    pub verbose: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 128,
            adam: AdamConfig::default(),
            seed: 0,
            nll_weight: 1.0,
            restart_patience: 10,
            lr_patience: 20,
            stop_patience: 40,
            train_limit: None,
            verbose: false,
        }
    }
}

#[derive(Debug, PartialEq)]
enum Action {
    Improved,
    Continue,
    Stop,
    Adjust { restart: bool, halve_lr: bool },
}

struct Schedule {
    best: f64,
    stagnant: usize,
    restart: usize,
    halve: usize,
    stop: usize,
}

impl Schedule {
    fn new(cfg: &TrainConfig) -> Self {
        Self {
            best: f64::INFINITY,
            stagnant: 0,
            restart: cfg.restart_patience,
            halve: cfg.lr_patience,
            stop: cfg.stop_patience,
        }
    }

    fn observe(&mut self, val: f64) -> Action {
        if val < self.best {
            self.best = val;
            self.stagnant = 0;
            return Action::Improved;
        }
        self.stagnant += 1;
        if self.stop > 0 && self.stagnant >= self.stop {
            return Action::Stop;
        }
        let restart = self.restart > 0 && self.stagnant % self.restart == 0;
        let halve_lr = self.halve > 0 && self.stagnant % self.halve == 0;
        if restart || halve_lr {
            Action::Adjust { restart, halve_lr }
        } else {
            Action::Continue
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ElboEpoch {
    pub epoch: usize,
    pub train: ElboTerms,
    pub val: ElboTerms,
    pub learning_rate: f32,
}

/// Per-run training report, written next to the checkpoint as JSON.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VaeTrainReport {
    pub config: TrainConfig,
    pub z_dim: usize,
    pub history: Vec<ElboEpoch>,
    pub best_epoch: usize,
    pub test: Option<ElboTerms>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassifierEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub learning_rate: f32,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassifierTrainReport {
    pub config: TrainConfig,
    pub history: Vec<ClassifierEpoch>,
    pub best_epoch: usize,
    pub test_accuracy: Option<f64>,
    pub seconds: f64,
}

fn limited(data: &Dataset, limit: Option<usize>) -> Dataset {
    match limit {
        Some(n) if n < data.len() => data.head(n),
        _ => data.clone(),
    }
}

fn validate_config(cfg: &TrainConfig, train: &Dataset) -> Result<()> {
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::InvalidArgument("epochs and batch size must be positive".into()));
    }
    if train.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    Ok(())
}

fn divergence(e: Error) -> Error {
    match e {
        Error::NonFinite(what) => Error::NonFinite(format!("{what} (training diverged)")),
        other => other,
    }
}

pub fn train_vae(
    vae: &mut VaeModel,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
) -> Result<VaeTrainReport> {
    let started = Instant::now();
    let train = limited(train, cfg.train_limit);
    validate_config(cfg, &train)?;
    let mut rng = Rng::new(cfg.seed);
    let mut adam = AdamState::new(cfg.adam);
    let mut schedule = Schedule::new(cfg);
    let mut best = vae.clone();
    let mut best_epoch = 0;
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let val_data = if val.is_empty() { &train } else { val };

    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut acc = ElboTerms::default();
        for chunk in order.chunks(cfg.batch_size) {
            let x = train.images.select_rows(chunk);
            let out = vae
                .elbo_loss(&x, cfg.nll_weight, Mode::Train, &mut rng)
                .map_err(divergence)?;
            let w = chunk.len() as f64;
            acc.total += out.terms.total * w;
            acc.nll += out.terms.nll * w;
            acc.kl += out.terms.kl * w;
            let mut grads = out.encoder_grads.tensors();
            grads.extend(out.decoder_grads.tensors());
            adam.step(&mut vae.params_mut(), &grads).map_err(divergence)?;
        }
        let n = train.len() as f64;
        let train_terms = ElboTerms {
            total: acc.total / n,
            nll: acc.nll / n,
            kl: acc.kl / n,
        };
        let val_terms = vae.evaluate(&val_data.images, cfg.nll_weight, cfg.seed ^ 0x5eed).map_err(divergence)?;
        history.push(ElboEpoch {
            epoch,
            train: train_terms,
            val: val_terms,
            learning_rate: adam.learning_rate(),
        });
        if cfg.verbose {
            eprintln!(
                "epoch {epoch:4}  train {:9.3} (nll {:9.3} kl {:7.3})  val {:9.3} (nll {:9.3} kl {:7.3})  lr {:.2e}  {:.0}s",
                train_terms.total,
                train_terms.nll,
                train_terms.kl,
                val_terms.total,
                val_terms.nll,
                val_terms.kl,
                adam.learning_rate(),
                started.elapsed().as_secs_f64()
            );
        }
        match schedule.observe(val_terms.total) {
            Action::Improved => {
                best = vae.clone();
                best_epoch = epoch;
            }
            Action::Continue => {}
            Action::Stop => break,
            Action::Adjust { restart, halve_lr } => {
                if restart {
                    *vae = best.clone();
                    adam.reset_moments();
                }
                if halve_lr {
                    adam.set_learning_rate(adam.learning_rate() * 0.5);
                }
            }
        }
    }
    *vae = best;
    Ok(VaeTrainReport {
        config: cfg.clone(),
        z_dim: vae.z_dim,
        history,
        best_epoch,
        test: None,
        seconds: started.elapsed().as_secs_f64(),
    })
}

pub fn train_classifier(
    clf: &mut ClassifierModel,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
) -> Result<ClassifierTrainReport> {
    let started = Instant::now();
    let train = limited(train, cfg.train_limit);
    validate_config(cfg, &train)?;
    let mut rng = Rng::new(cfg.seed);
    let mut adam = AdamState::new(cfg.adam);
    let mut schedule = Schedule::new(cfg);
    let mut best = clf.clone();
    let mut best_epoch = 0;
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let val_data = if val.is_empty() { &train } else { val };

    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let (mut loss, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let x = train.images.select_rows(chunk);
            let y: Vec<u8> = chunk.iter().map(|&i| train.labels[i]).collect();
            let out = clf.loss(&x, &y, Mode::Train, &mut rng).map_err(divergence)?;
            loss += out.loss * chunk.len() as f64;
            correct += out.correct;
            adam.step(&mut clf.net.params_mut(), &out.grads.tensors()).map_err(divergence)?;
        }
        let n = train.len() as f64;
        let (val_loss, val_accuracy) = classifier_val(clf, val_data)?;
        history.push(ClassifierEpoch {
            epoch,
            train_loss: loss / n,
            train_accuracy: correct as f64 / n,
            val_loss,
            val_accuracy,
            learning_rate: adam.learning_rate(),
        });
        if cfg.verbose {
            eprintln!(
                "epoch {epoch:4}  train loss {:.4} acc {:.4}  val loss {:.4} acc {:.4}  {:.0}s",
                loss / n,
                correct as f64 / n,
                val_loss,
                val_accuracy,
                started.elapsed().as_secs_f64()
            );
        }
        match schedule.observe(val_loss) {
            Action::Improved => {
                best = clf.clone();
                best_epoch = epoch;
            }
            Action::Continue => {}
            Action::Stop => break,
            Action::Adjust { restart, halve_lr } => {
                if restart {
                    *clf = best.clone();
                    adam.reset_moments();
                }
                if halve_lr {
                    adam.set_learning_rate(adam.learning_rate() * 0.5);
                }
            }
        }
    }
    *clf = best;
    Ok(ClassifierTrainReport {
        config: cfg.clone(),
        history,
        best_epoch,
        test_accuracy: None,
        seconds: started.elapsed().as_secs_f64(),
    })
}

fn classifier_val(clf: &ClassifierModel, data: &Dataset) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut correct = 0usize;
    let mut start = 0;
    let mut rng = Rng::new(0);
    while start < data.len() {
        let end = (start + 2000).min(data.len());
        let idx: Vec<usize> = (start..end).collect();
        let out = clf.loss(&data.images.select_rows(&idx), &data.labels[start..end], Mode::Eval, &mut rng)?;
        loss += out.loss * (end - start) as f64;
        correct += out.correct;
        start = end;
    }
    let n = data.len().max(1) as f64;
    Ok((loss / n, correct as f64 / n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Origin, Split};
    use crate::tensor::Tensor;

    #[test]
    fn schedule_restarts_halves_and_stops() {
        let cfg = TrainConfig {
            restart_patience: 2,
            lr_patience: 4,
            stop_patience: 6,
            ..TrainConfig::default()
        };
        let mut s = Schedule::new(&cfg);
        assert_eq!(s.observe(5.0), Action::Improved);
        assert_eq!(s.observe(6.0), Action::Continue);
        assert_eq!(s.observe(6.0), Action::Adjust { restart: true, halve_lr: false });
        assert_eq!(s.observe(6.0), Action::Continue);
        assert_eq!(s.observe(6.0), Action::Adjust { restart: true, halve_lr: true });
        assert_eq!(s.observe(4.0), Action::Improved);
        for _ in 0..5 {
            assert_ne!(s.observe(4.0), Action::Stop);
        }
        assert_eq!(s.observe(4.0), Action::Stop);
    }

    #[test]
    fn toy_vae_reduces_reconstruction_loss() {
        let mut rng = Rng::new(0);
        let px: Vec<f32> = (0..10 * 16).map(|i| if (i * 7) % 5 < 2 { 1.0 } else { 0.0 }).collect();
        let data = Dataset::new(Tensor::matrix(10, 16, px).unwrap(), vec![0; 10], Origin::Mnist, Split::Train).unwrap();
        let mut vae = VaeModel::with_hidden(16, &[12, 8], 2, 0.0, &mut rng).unwrap();
        let cfg = TrainConfig {
            epochs: 500,
            batch_size: 10,
            stop_patience: 0,
            restart_patience: 0,
            lr_patience: 0,
            ..TrainConfig::default()
        };
        let report = train_vae(&mut vae, &data, &data, &cfg).unwrap();
        let first = report.history[0].train.nll;
        let last = vae.evaluate(&data.images, 1.0, 1).unwrap().nll;
        assert!(last < first, "{last} !< {first}");
    }

    #[test]
    fn classifier_learns_a_separable_toy_problem() {
        let mut rng = Rng::new(1);
        let n = 200;
        let mut px = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let c = (i % 2) as u8;
            for j in 0..6 {
                let base = if (j < 3) == (c == 0) { 0.8 } else { 0.2 };
                px.push((base + 0.1 * rng.uniform() as f32).min(1.0));
            }
            labels.push(c);
        }
        let data = Dataset::new(Tensor::matrix(n, 6, px).unwrap(), labels, Origin::Mnist, Split::Train).unwrap();
        let mut clf = ClassifierModel::with_widths(&[6, 8, 4, 2], 0.0, &mut rng).unwrap();
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 20,
            adam: AdamConfig { learning_rate: 0.01, ..AdamConfig::default() },
            ..TrainConfig::default()
        };
        train_classifier(&mut clf, &data, &data, &cfg).unwrap();
        assert!(clf.accuracy(&data.images, &data.labels).unwrap() > 0.95);
    }
}

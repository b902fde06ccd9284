//! Run configuration and artifact manifests.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::data::{build_combined, DataSplits, Origin};
use crate::error::{Error, Result};
use crate::intervention::Intervention;
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetName {
    Mnist,
    Fashion,
    Combined,
}

impl DatasetName {
    pub fn z_dim(self) -> usize {
        match self {
            DatasetName::Combined => 100,
            _ => 50,
        }
    }

    pub fn nll_weight(self) -> f32 {
        match self {
            DatasetName::Combined => 1000.0,
            _ => 1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetName::Mnist => "mnist",
            DatasetName::Fashion => "fashion",
            DatasetName::Combined => "combined",
        }
    }

    /// Load splits from `data_dir/{mnist,fashion}`.
    pub fn load(self, data_dir: &Path) -> Result<DataSplits> {
        match self {
            DatasetName::Mnist => DataSplits::load_dir(data_dir.join("mnist"), Origin::Mnist),
            DatasetName::Fashion => DataSplits::load_dir(data_dir.join("fashion"), Origin::Fashion),
            DatasetName::Combined => build_combined(
                &DataSplits::load_dir(data_dir.join("mnist"), Origin::Mnist)?,
                &DataSplits::load_dir(data_dir.join("fashion"), Origin::Fashion)?,
            ),
        }
    }
}

impl std::str::FromStr for DatasetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DatasetName::Mnist),
            "fashion" | "fmnist" => Ok(DatasetName::Fashion),
            "combined" => Ok(DatasetName::Combined),
            other => Err(Error::InvalidArgument(format!("unknown dataset {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileConfig {
    pub tau: f32,
    pub clusters: usize,
    pub cluster_seed: u64,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self {
            tau: crate::atlas::TAU,
            clusters: 10,
            cluster_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub recon_steps: usize,
    pub recon_lr: f32,
    pub ocsvm_gamma: f64,
    pub ocsvm_nu: f64,
    pub ocsvm_train_size: usize,
    pub knn_ks: Vec<usize>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            recon_steps: crate::metrics::recon::DEFAULT_STEPS,
            recon_lr: crate::metrics::recon::DEFAULT_LR,
            ocsvm_gamma: 0.1,
            ocsvm_nu: 0.15,
            ocsvm_train_size: 3000,
            knn_ks: vec![1, 5],
        }
    }
}

/// Everything needed to reproduce a pipeline stage. Echoed into every
/// artifact directory through [`Manifest`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetName,
    pub data_dir: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub z_dim: Option<usize>,
    #[serde(default)]
    pub vae: TrainConfig,
    #[serde(default)]
    pub classifier: TrainConfig,
    #[serde(default)]
    pub profile: ProfileConfig,
    #[serde(default)]
    pub intervention: Intervention,
    #[serde(default)]
    pub metrics: MetricsConfig,
}

impl RunConfig {
    pub fn new(dataset: DatasetName, data_dir: impl Into<PathBuf>, output_dir: impl Into<PathBuf>) -> Self {
        let vae = TrainConfig {
            nll_weight: dataset.nll_weight(),
            ..TrainConfig::default()
        };
        Self {
            dataset,
            data_dir: data_dir.into(),
            output_dir: output_dir.into(),
            seed: 0,
            z_dim: None,
            vae,
            classifier: TrainConfig {
                epochs: 30,
                ..TrainConfig::default()
            },
            profile: ProfileConfig::default(),
            intervention: Intervention::default(),
            metrics: MetricsConfig::default(),
        }
    }

    pub fn z_dim(&self) -> usize {
        self.z_dim.unwrap_or_else(|| self.dataset.z_dim())
    }

    pub fn validate(&self) -> Result<()> {
        if self.z_dim() == 0 {
            return Err(Error::InvalidArgument("z_dim must be positive".into()));
        }
        if self.vae.batch_size == 0 || self.classifier.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if self.profile.clusters < 2 {
            return Err(Error::InvalidArgument("need at least 2 clusters".into()));
        }
        if !(self.metrics.ocsvm_nu > 0.0 && self.metrics.ocsvm_nu <= 1.0) {
            return Err(Error::InvalidArgument("ocsvm nu must lie in (0, 1]".into()));
        }
        self.intervention.validate()
    }

    pub fn vae_path(&self) -> PathBuf {
        self.output_dir.join("vae.ckpt")
    }

    pub fn classifier_path(&self) -> PathBuf {
        self.output_dir.join("classifier.ckpt")
    }

    pub fn profile_path(&self) -> PathBuf {
        self.output_dir.join("profile.bin")
    }

    pub fn load_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save_file(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path, self)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub argv: Vec<String>,
    pub version: String,
    pub created_unix: u64,
    pub config: RunConfig,
    pub outputs: Vec<String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn new(command: &str, argv: Vec<String>, config: &RunConfig, outputs: Vec<String>) -> Self {
        Self {
            command: command.to_string(),
            argv,
            version: env!("CARGO_PKG_VERSION").to_string(),
            created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            config: config.clone(),
            outputs,
        }
    }

    /// Write `dir/manifest.json`, or `dir/manifest.<command>.json` when `dir`
    /// is shared by several stages.
    pub fn write(&self, dir: impl AsRef<Path>, shared: bool) -> Result<PathBuf> {
        let name = if shared {
            format!("manifest.{}.json", self.command)
        } else {
            MANIFEST_FILE.to_string()
        };
        let path = dir.as_ref().join(name);
        write_json(&path, self)?;
        Ok(path)
    }
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

//! Command-line arguments.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use creadec::config::DatasetName;
use creadec::intervention::{Intervention, Method, OnStat};

#[derive(Debug, Parser)]
#[command(name = "creadec", version, about = "Creative decoding for variational autoencoders")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the VAE and write `vae.ckpt` plus a training report.
    TrainVae(TrainArgs),
    /// Train the classifier used by the entropy metrics.
    TrainClassifier(TrainArgs),
    /// Profile decoder activations on the training set.
    Profile(ProfileArgs),
    /// Generate a sample store with a decoding method.
    Generate(GenerateArgs),
    /// Score sample stores and write a per-method summary table.
    Metrics(MetricsArgs),
    /// Apply the creativity filter calibrated on regular generations.
    Filter(FilterArgs),
    /// Build label tables and statistics from annotation records.
    Evaluate(EvaluateArgs),
    /// Serve samples to annotators over HTTP.
    ServeAnnotation(ServeArgs),
    /// Write the deduplicated annotation records.
    Export(ExportArgs),
}

#[derive(Clone, Debug, Args)]
pub struct CommonArgs {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// mnist, fashion or combined.
    #[arg(long)]
    pub dataset: Option<DatasetName>,
    /// Directory holding `mnist/` and `fashion/` IDX files.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Artifact directory (checkpoints, profile, reports).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Train on the first N training images only.
    #[arg(long)]
    pub train_limit: Option<usize>,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Profile on the first N training images only.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub clusters: Option<usize>,
}

#[derive(Clone, Debug, Default, Args)]
pub struct InterventionArgs {
    #[arg(long)]
    pub method: Option<Method>,
    /// Number of neurons to flip (a fraction of the pool when below 1).
    #[arg(long)]
    pub flips: Option<f64>,
    /// 1-based decoder layer.
    #[arg(long)]
    pub layer: Option<usize>,
    #[arg(long)]
    pub kappa_low: Option<f64>,
    #[arg(long)]
    pub kappa_high: Option<f64>,
    /// max or mean.
    #[arg(long)]
    pub stat: Option<OnStat>,
    #[arg(long)]
    pub lambda: Option<f32>,
    #[arg(long)]
    pub noise_sigma: Option<f32>,
    #[arg(long)]
    pub noise_fraction: Option<f64>,
    #[arg(long)]
    pub endpoints: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f32>,
    /// Number of least-active clusters to draw from.
    #[arg(long)]
    pub pool_clusters: Option<usize>,
    #[arg(long)]
    pub class_cap: Option<f32>,
    #[arg(long)]
    pub entropy_top: Option<f64>,
    #[arg(long)]
    pub turn_off_correlated: bool,
}

impl InterventionArgs {
    pub fn apply(&self, iv: &mut Intervention) {
        if let Some(v) = self.method {
            iv.method = v;
        }
        if let Some(v) = self.flips {
            iv.rho = v;
        }
        if let Some(v) = self.layer {
            iv.layer = v;
        }
        if let Some(v) = self.kappa_low {
            iv.kappa[0] = v;
        }
        if let Some(v) = self.kappa_high {
            iv.kappa[1] = v;
        }
        if let Some(v) = self.stat {
            iv.stat = v;
        }
        if let Some(v) = self.lambda {
            iv.lambda = v;
        }
        if self.noise_sigma.is_some() {
            iv.noise_sigma = self.noise_sigma;
        }
        if let Some(v) = self.noise_fraction {
            iv.noise_fraction = v;
        }
        if let Some(v) = self.endpoints {
            iv.endpoints = v;
        }
        if self.alpha.is_some() {
            iv.alpha = self.alpha;
        }
        if let Some(v) = self.pool_clusters {
            iv.clusters = v;
        }
        if let Some(v) = self.class_cap {
            iv.class_cap = v;
        }
        if let Some(v) = self.entropy_top {
            iv.entropy_top = v;
        }
        if self.turn_off_correlated {
            iv.turn_off_correlated = true;
        }
    }
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub intervention: InterventionArgs,
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    /// Sample store directory; defaults to `<out>/samples/<method>`.
    #[arg(long)]
    pub samples: Option<PathBuf>,
    /// Sample id prefix; defaults to an opaque tag that hides the method.
    #[arg(long)]
    pub prefix: Option<String>,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Sample store directories.
    #[arg(long, required = true, num_args = 1..)]
    pub samples: Vec<PathBuf>,
    /// Summary CSV; defaults to `<out>/metrics_summary.csv`.
    #[arg(long)]
    pub summary: Option<PathBuf>,
    #[arg(long)]
    pub recon_steps: Option<usize>,
    #[arg(long)]
    pub recon_lr: Option<f32>,
    /// Fit the one-class SVM on at most this many training latents.
    #[arg(long)]
    pub ocsvm_train_size: Option<usize>,
    /// Score against the first N training images only.
    #[arg(long)]
    pub train_limit: Option<usize>,
    /// Skip the classifier-based metrics.
    #[arg(long)]
    pub no_classifier: bool,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Store to filter (scored by `metrics`).
    #[arg(long)]
    pub samples: PathBuf,
    /// Scored store of regular generations used for calibration.
    #[arg(long)]
    pub calibration: PathBuf,
    /// Lower entropy bound; defaults to the mean entropy of test images.
    #[arg(long)]
    pub ice_low: Option<f64>,
    /// Upper entropy bound; defaults to the mean entropy of uniform noise.
    #[arg(long)]
    pub ice_high: Option<f64>,
    /// Classifier whose entropy is used; defaults to the dataset name.
    #[arg(long)]
    pub classifier: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Annotation records (one JSON object per line).
    #[arg(long)]
    pub annotations: PathBuf,
    /// Sample stores providing method tags and metrics.
    #[arg(long, num_args = 0..)]
    pub samples: Vec<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub min_agree: usize,
    /// Use majority vote instead of a fixed quorum.
    #[arg(long)]
    pub majority: bool,
    /// Output directory; defaults to `<out>/evaluation`.
    #[arg(long)]
    pub eval_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, required = true, num_args = 1..)]
    pub samples: Vec<PathBuf>,
    /// Label log; defaults to `<out>/annotations.jsonl`.
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    pub addr: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Number of training images in the priming gallery.
    #[arg(long, default_value_t = 60)]
    pub priming: usize,
    /// Allowed browser origin; any origin when omitted.
    #[arg(long)]
    pub cors_origin: Option<String>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
pub enum Role {
    #[default]
    Annotator,
    Evaluator,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub annotations: PathBuf,
    /// Stores used to attach method tags for the evaluator role.
    #[arg(long, num_args = 0..)]
    pub samples: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = Role::Annotator)]
    pub role: Role,
    /// Output file; stdout when omitted.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

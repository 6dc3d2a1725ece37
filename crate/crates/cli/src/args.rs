use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use dysflux_core::datasets::MergeName;
use dysflux_core::training::{AuxTask, ModPolicy, Monitor};
use dysflux_core::{ClassSet, Split, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "dysflux", version, about = "Multi-label dysfluency detection over precomputed backbone features")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check manifest invariants and speaker-exclusive splits.
    Validate(ValidateArgs),
    /// Label distribution and co-occurrence of a manifest.
    Stats(StatsArgs),
    /// Combine manifests into one.
    Merge(MergeArgs),
    /// Train a head and write its checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on one split.
    Evaluate(EvaluateArgs),
    /// Train one head per (w_main, alpha, gamma) cell and keep the best.
    GridSearch(GridArgs),
    /// Finite-difference check of the head and losses.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic separable corpus with feature files.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct ManifestArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Annotators needed for a positive label when only counts are given.
    #[arg(long, default_value_t = 2)]
    pub min_annotators: u32,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[command(flatten)]
    pub input: ManifestArgs,
    /// Also require a feature file for every clip.
    #[arg(long)]
    pub features_dir: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[command(flatten)]
    pub input: ManifestArgs,
    /// Restrict to one split; all clips otherwise.
    #[arg(long)]
    pub split: Option<Split>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    /// Repeat once per input manifest.
    #[arg(long = "manifest", required = true)]
    pub manifests: Vec<PathBuf>,
    /// ALL-EN, Multi-S, Multi, or any other name.
    #[arg(long)]
    pub name: MergeName,
    #[arg(long, default_value_t = 2)]
    pub min_annotators: u32,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct HyperArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub w_main: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub aux_task: Option<AuxTask>,
    /// Defaults to the manifest's class set.
    #[arg(long)]
    pub class_set: Option<ClassSet>,
    #[arg(long)]
    pub monitor: Option<Monitor>,
    #[arg(long)]
    pub mod_policy: Option<ModPolicy>,
    /// Checkpoint directory to initialise from.
    #[arg(long)]
    pub warm_start: Option<PathBuf>,
}

impl HyperArgs {
    pub fn resolve(&self, manifest_class_set: ClassSet) -> TrainConfig {
        let mut c = TrainConfig {
            class_set: self.class_set.unwrap_or(manifest_class_set),
            ..TrainConfig::default()
        };
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.lr {
            c.learning_rate = v;
        }
        if let Some(v) = self.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = self.max_epochs {
            c.max_epochs = v;
        }
        if let Some(v) = self.patience {
            c.patience = v;
        }
        if let Some(v) = self.w_main {
            c.loss.w_main = v;
        }
        if let Some(v) = self.alpha {
            c.loss.alpha = v;
        }
        if let Some(v) = self.gamma {
            c.loss.gamma = v;
        }
        if let Some(v) = self.aux_task {
            c.aux_task = v;
        }
        if let Some(v) = self.monitor {
            c.monitor = v;
        }
        if let Some(v) = self.mod_policy {
            c.mod_policy = v;
        }
        c
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub input: ManifestArgs,
    #[arg(long)]
    pub features_dir: PathBuf,
    #[command(flatten)]
    pub hyper: HyperArgs,
    /// Checkpoint directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub input: ManifestArgs,
    #[arg(long)]
    pub features_dir: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long, default_value_t = dysflux_core::metrics::DEFAULT_THRESHOLD)]
    pub threshold: f64,
    /// Report file; JSON when the name ends in `.json`, TSV otherwise.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[command(flatten)]
    pub input: ManifestArgs,
    #[arg(long)]
    pub features_dir: PathBuf,
    #[command(flatten)]
    pub hyper: HyperArgs,
    /// `"<w list>;<alpha list>;<gamma list>"`; the full 5×9×3 grid when absent.
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Directory for the ranking and the best checkpoint.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub clips: usize,
    #[arg(long)]
    pub out: PathBuf,
}

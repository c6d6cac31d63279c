//! Effective run configuration: flags over config file over defaults.

use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use serde::{Deserialize, Serialize};
use spectralnet::{FusionMode, ModelConfig, TrainConfig};

/// Every knob, as given on the command line. Unset flags fall through to the
/// config file, then to the defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// Hyperspectral cube, an (M, N, R) NPY array.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Ground truth, an (M, N) integer NPY array; 0 marks unlabeled pixels.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Factor-analysis components kept (B).
    #[arg(long)]
    pub bands: Option<usize>,
    /// Patch side length (S).
    #[arg(long)]
    pub patch: Option<usize>,
    /// Wavelet levels fused into the network (default: deepest the patch allows, at most 4).
    #[arg(long)]
    pub levels: Option<usize>,
    /// Training fraction of each class.
    #[arg(long)]
    pub fraction: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, value_parser = ["concat", "add"])]
    pub fusion: Option<String>,
    /// Class names: a file with one name per line, or `indian-pines`.
    #[arg(long)]
    pub class_names: Option<String>,
    /// Run directory shared by all commands.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON file with any subset of the configuration keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Config-file contents; keys mirror the flags.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    data: Option<PathBuf>,
    labels: Option<PathBuf>,
    bands: Option<usize>,
    patch: Option<usize>,
    levels: Option<usize>,
    fraction: Option<f64>,
    seed: Option<u64>,
    epochs: Option<usize>,
    lr: Option<f64>,
    momentum: Option<f64>,
    batch_size: Option<usize>,
    fusion: Option<FusionMode>,
    class_names: Option<String>,
    out: Option<PathBuf>,
    shuffle: Option<bool>,
    stage_channels: Option<Vec<usize>>,
    dense_width: Option<usize>,
    dropout: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub bands: usize,
    pub patch: usize,
    pub levels: Option<usize>,
    pub fraction: f64,
    pub seed: u64,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub shuffle: bool,
    pub fusion: FusionMode,
    pub stage_channels: Vec<usize>,
    pub dense_width: usize,
    pub dropout: [f64; 2],
    pub class_names: Option<String>,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::new(24, 3, 1);
        let train = TrainConfig::default();
        Self {
            data: None,
            labels: None,
            bands: 3,
            patch: 24,
            levels: None,
            fraction: 0.3,
            seed: 0,
            epochs: train.epochs,
            lr: train.learning_rate,
            momentum: train.momentum,
            batch_size: train.batch_size,
            shuffle: train.shuffle,
            fusion: model.fusion_mode,
            stage_channels: model.stage_channels,
            dense_width: model.dense_width,
            dropout: model.dropout_rates,
            class_names: None,
            out: PathBuf::from("spectralnet-run"),
        }
    }
}

impl RunConfig {
    pub fn resolve(args: &ConfigArgs) -> anyhow::Result<Self> {
        let file = match &args.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                serde_json::from_str::<FileConfig>(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None => FileConfig::default(),
        };
        let d = Self::default();
        let fusion = match &args.fusion {
            Some(s) => Some(s.parse::<FusionMode>().map_err(anyhow::Error::msg)?),
            None => file.fusion,
        };
        let cfg = Self {
            data: args.data.clone().or(file.data),
            labels: args.labels.clone().or(file.labels),
            bands: args.bands.or(file.bands).unwrap_or(d.bands),
            patch: args.patch.or(file.patch).unwrap_or(d.patch),
            levels: args.levels.or(file.levels),
            fraction: args.fraction.or(file.fraction).unwrap_or(d.fraction),
            seed: args.seed.or(file.seed).unwrap_or(d.seed),
            epochs: args.epochs.or(file.epochs).unwrap_or(d.epochs),
            lr: args.lr.or(file.lr).unwrap_or(d.lr),
            momentum: args.momentum.or(file.momentum).unwrap_or(d.momentum),
            batch_size: args.batch_size.or(file.batch_size).unwrap_or(d.batch_size),
            shuffle: file.shuffle.unwrap_or(d.shuffle),
            fusion: fusion.unwrap_or(d.fusion),
            stage_channels: file.stage_channels.unwrap_or(d.stage_channels),
            dense_width: file.dense_width.unwrap_or(d.dense_width),
            dropout: file.dropout.unwrap_or(d.dropout),
            class_names: args.class_names.clone().or(file.class_names),
            out: args.out.clone().or(file.out).unwrap_or(d.out),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> anyhow::Result<()> {
        anyhow::ensure!(self.bands > 0, "--bands must be positive");
        anyhow::ensure!(
            self.patch > 0 && self.patch.is_multiple_of(2),
            "--patch must be even and positive, got {}",
            self.patch
        );
        anyhow::ensure!(
            self.fraction > 0.0 && self.fraction <= 1.0,
            "--fraction must lie in (0, 1], got {}",
            self.fraction
        );
        Ok(())
    }

    /// Paths of the raw inputs, which must exist.
    pub fn inputs(&self) -> anyhow::Result<(&Path, &Path)> {
        let data = self.data.as_deref().context("--data is required")?;
        let labels = self.labels.as_deref().context("--labels is required")?;
        for p in [data, labels] {
            anyhow::ensure!(p.is_file(), "input file {} does not exist", p.display());
        }
        Ok((data, labels))
    }

    pub fn model_config(&self, classes: usize) -> ModelConfig {
        let levels = self.levels.unwrap_or_else(|| ModelConfig::default_levels(self.patch, self.stage_channels.len()));
        ModelConfig {
            patch_size: self.patch,
            input_bands: self.bands,
            class_count: classes,
            stage_channels: self.stage_channels.clone(),
            wavelet_levels: levels,
            dense_width: self.dense_width,
            dropout_rates: self.dropout,
            fusion_mode: self.fusion,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            learning_rate: self.lr,
            momentum: self.momentum,
            batch_size: self.batch_size,
            seed: self.seed,
            shuffle: self.shuffle,
        }
    }

    pub fn class_names(&self, classes: usize) -> anyhow::Result<Vec<String>> {
        let names: Vec<String> = match self.class_names.as_deref() {
            None => (1..=classes).map(|k| format!("Class {k}")).collect(),
            Some("indian-pines") => spectralnet::INDIAN_PINES_CLASSES.iter().map(|s| s.to_string()).collect(),
            Some(path) => std::fs::read_to_string(path)
                .with_context(|| format!("reading class names from {path}"))?
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect(),
        };
        anyhow::ensure!(names.len() == classes, "{} class names for {classes} classes", names.len());
        Ok(names)
    }
}

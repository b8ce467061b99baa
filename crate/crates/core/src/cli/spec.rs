//! Experiment specs: TOML files with command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::CliError;
use crate::capsnet::{CapsNetConfig, ClassCapsSpec, ConvBaseSpec, PrimaryCapsSpec};
use crate::imaging::{AugmentSpec, PreprocConfig};
use crate::train::{EarlyStop, Monitor, TrainConfig};

/// Fully resolved parameters of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub manifest: Option<PathBuf>,
    /// Precomputed split; when absent one is drawn from the fractions.
    pub split: Option<PathBuf>,
    pub train_frac: f64,
    pub val_frac: f64,
    pub variant: String,
    /// Feature file for the `external` variant.
    pub features: Option<PathBuf>,
    pub input_size: usize,
    pub hist_eq: bool,
    pub primary_channels: usize,
    pub primary_dim: usize,
    pub primary_kernel: usize,
    pub primary_stride: usize,
    pub class_dim: usize,
    pub routing_iters: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub augment: bool,
    pub early_stop: Option<Monitor>,
    pub patience: usize,
    pub seed: u64,
    pub threshold: f64,
    pub out_dir: PathBuf,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        let caps = PrimaryCapsSpec::default();
        let train = TrainConfig::default();
        Self {
            manifest: None,
            split: None,
            train_frac: 0.8,
            val_frac: 0.2,
            variant: "caps-256x9".into(),
            features: None,
            input_size: PreprocConfig::default().target_size,
            hist_eq: true,
            primary_channels: caps.channels,
            primary_dim: caps.dim,
            primary_kernel: caps.kernel,
            primary_stride: caps.stride,
            class_dim: ClassCapsSpec::default().dim,
            routing_iters: 3,
            epochs: train.epochs,
            lr: train.lr,
            batch_size: train.batch_size,
            augment: true,
            early_stop: None,
            patience: 10,
            seed: 0,
            threshold: 0.5,
            out_dir: PathBuf::from("out"),
        }
    }
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl ExperimentSpec {
    /// Reads a TOML spec. Relative paths are taken relative to its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn from_toml(text: &str, base: &Path) -> Result<Self, CliError> {
        let mut spec: Self = toml::from_str(text).map_err(|e| CliError::Config(format!("spec: {e}")))?;
        spec.resolve_paths(base);
        Ok(spec)
    }

    pub(crate) fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.manifest);
        resolve(base, &mut self.split);
        resolve(base, &mut self.features);
        if self.out_dir.is_relative() && base != Path::new("") && base != Path::new(".") {
            self.out_dir = base.join(&self.out_dir);
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec is plain data")
    }

    /// Hash of the spec without its output directory, so the same
    /// experiment gets the same id wherever it is written.
    pub fn run_id(&self) -> String {
        let mut keyed = self.clone();
        keyed.out_dir = PathBuf::new();
        let digest = Sha256::digest(keyed.to_toml().as_bytes());
        hex::encode(&digest[..8])
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(self.run_id())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.manifest.is_none() {
            return Err(CliError::Usage("a manifest is required (--manifest or `manifest` in the spec)".into()));
        }
        check_fractions(self.train_frac, self.val_frac)?;
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(CliError::Config(format!("threshold must lie in [0, 1], got {}", self.threshold)));
        }
        if (self.variant == "external") != self.features.is_some() {
            return Err(CliError::Config(
                "the `external` variant and a feature file go together".into(),
            ));
        }
        self.train_config().validate().map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            early_stop: self.early_stop.map(|monitor| EarlyStop {
                monitor,
                patience: self.patience,
            }),
            augment: if self.augment {
                AugmentSpec::default()
            } else {
                AugmentSpec::disabled()
            },
            seed: self.seed,
            ..TrainConfig::default()
        }
    }

    /// Network config; `feature_shape` comes from the feature file in
    /// external mode.
    pub fn model_config(&self, feature_shape: Option<[usize; 3]>) -> Result<CapsNetConfig, CliError> {
        let base = ConvBaseSpec::from_variant(&self.variant, feature_shape).map_err(|e| CliError::Config(e.to_string()))?;
        let mut cfg = CapsNetConfig::new(
            base,
            PreprocConfig {
                target_size: self.input_size,
                apply_he: self.hist_eq,
                rescale_01: true,
            },
        );
        cfg.primary_caps = PrimaryCapsSpec {
            channels: self.primary_channels,
            dim: self.primary_dim,
            kernel: self.primary_kernel,
            stride: self.primary_stride,
        };
        cfg.class_caps.dim = self.class_dim;
        cfg.routing_iters = self.routing_iters;
        cfg.seed = self.seed;
        cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }
}

pub(crate) fn check_fractions(train_frac: f64, val_frac: f64) -> Result<(), CliError> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(CliError::Usage(format!("--train-frac must lie in (0, 1), got {train_frac}")));
    }
    if !(0.0..1.0).contains(&val_frac) {
        return Err(CliError::Usage(format!("--val-frac must lie in [0, 1), got {val_frac}")));
    }
    Ok(())
}

/// A spec plus the lists whose cartesian product forms the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(flatten)]
    pub base: ExperimentSpec,
    pub grid: GridAxes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridAxes {
    pub ratios: Vec<f64>,
    #[serde(default)]
    pub variants: Vec<String>,
    #[serde(default)]
    pub augment: Vec<bool>,
}

impl GridSpec {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut spec: Self = toml::from_str(&text).map_err(|e| CliError::Config(format!("grid spec: {e}")))?;
        spec.base.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(spec)
    }

    /// Cells in variant, ratio, augmentation order. Empty axes fall back to
    /// the base spec's value.
    pub fn cells(&self) -> Result<Vec<ExperimentSpec>, CliError> {
        if self.base.split.is_some() {
            return Err(CliError::Config("a grid draws its own splits; remove `split`".into()));
        }
        if self.grid.ratios.is_empty() {
            return Err(CliError::Config("grid.ratios is empty".into()));
        }
        let variants = if self.grid.variants.is_empty() {
            vec![self.base.variant.clone()]
        } else {
            self.grid.variants.clone()
        };
        let augs = if self.grid.augment.is_empty() {
            vec![self.base.augment]
        } else {
            self.grid.augment.clone()
        };
        let mut cells = Vec::new();
        for v in &variants {
            for &r in &self.grid.ratios {
                for &a in &augs {
                    let mut cell = self.base.clone();
                    cell.variant = v.clone();
                    cell.train_frac = r;
                    cell.augment = a;
                    cell.validate()?;
                    cells.push(cell);
                }
            }
        }
        Ok(cells)
    }
}

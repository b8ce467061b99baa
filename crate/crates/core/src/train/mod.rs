//! Mini-batch Adam training with validation-loss checkpoint selection and
//! optional early stopping, plus the logistic feature head.

mod adam;
mod data;
mod linear;

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::margin_loss_value;
use crate::capsnet::{save_checkpoint, CapsNet, CheckpointError, ModelError};
use crate::dataset::Label;
use crate::imaging::AugmentSpec;
use crate::par;

pub use adam::{adam_step, Adam, AdamBlock, AdamConfig};
pub use data::{image_samples, load_feature_samples, load_image_samples, Sample, SampleInput};
pub use linear::{
    fit_logistic, flatten_features, logistic_objective, train_linear_head, LinearHeadConfig, LinearModel,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("data error: no feature record for image `{0}`")]
    MissingFeature(String),
    #[error("training diverged: non-finite loss or gradient at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monitor {
    ValLoss,
    ValAcc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EarlyStop {
    pub monitor: Monitor,
    #[serde(default = "default_patience")]
    pub patience: usize,
}

fn default_patience() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub early_stop: Option<EarlyStop>,
    pub augment: AugmentSpec,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 1e-4,
            batch_size: 32,
            adam: AdamConfig::default(),
            early_stop: None,
            augment: AugmentSpec::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive and finite");
        }
        if matches!(self.early_stop, Some(EarlyStop { patience: 0, .. })) {
            return bad("early_stop.patience must be at least 1");
        }
        self.augment.validate().map_err(TrainError::Config)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

/// Epoch numbers are 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainTrace {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_acc_epoch: usize,
    pub stopped_early: bool,
    pub checkpoint_path: Option<PathBuf>,
}

/// 1-based index of the smallest value, earliest on ties.
pub fn best_epoch(val_losses: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in val_losses.iter().enumerate() {
        if best.is_none_or(|(_, b)| v < b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i + 1)
}

fn best_acc_epoch(records: &[EpochRecord]) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, r) in records.iter().enumerate() {
        if r.val_acc > best.1 {
            best = (i, r.val_acc);
        }
    }
    best.0 + 1
}

impl TrainTrace {
    pub fn from_records(epochs: Vec<EpochRecord>) -> Option<Self> {
        let losses: Vec<f64> = epochs.iter().map(|r| r.val_loss).collect();
        Some(Self {
            best_epoch: best_epoch(&losses)?,
            best_val_acc_epoch: best_acc_epoch(&epochs),
            epochs,
            stopped_early: false,
            checkpoint_path: None,
        })
    }

    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch - 1]
    }

    /// One `{"epoch":n,"train_loss":x,"val_loss":y,"val_acc":z}` line per epoch.
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|r| serde_json::to_string(r).expect("plain data") + "\n")
            .collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Self, TrainError> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| TrainError::Data(format!("trace line: {e}"))))
            .collect::<Result<Vec<EpochRecord>, _>>()?;
        Self::from_records(records).ok_or_else(|| TrainError::Data("empty trace".into()))
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<(), TrainError> {
        fs::write(path, self.to_jsonl()).map_err(|source| TrainError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// splitmix64 finalizer, used to derive independent stream seeds.
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ a) ^ b)
}

/// Sample order for `epoch`, a function of (seed, epoch) only.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5348_5546, epoch as u64));
    order.shuffle(&mut rng);
    order
}

/// Augmentation seed of sample `index` in `epoch`.
pub fn augment_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    derive_seed(seed ^ index as u64, 0x4155_4720, epoch as u64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    /// Glaucoma score and true label per sample.
    pub scores: Vec<(f64, Label)>,
    pub predictions: Vec<Label>,
}

/// Mean margin loss, accuracy and scores over `samples`, without augmentation.
pub fn evaluate(model: &CapsNet, samples: &[Sample]) -> Result<Evaluation, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::Data("nothing to evaluate".into()));
    }
    let margin = model.config().margin.into();
    let preproc = model.config().preproc;
    let outs = par::map(samples, |_, s| -> Result<(f64, Label, f64), ModelError> {
        let out = model.forward(&s.tensor(&preproc, None))?;
        let pred = out.predict();
        let loss = margin_loss_value(&out.norms, s.label.index(), margin);
        Ok((loss, Label::from_index(pred.class).expect("two classes"), pred.score))
    });
    let mut loss = 0.0;
    let mut correct = 0;
    let mut scores = Vec::with_capacity(samples.len());
    let mut predictions = Vec::with_capacity(samples.len());
    for (s, r) in samples.iter().zip(outs) {
        let (l, p, score) = r?;
        loss += l;
        correct += usize::from(p == s.label);
        scores.push((score, s.label));
        predictions.push(p);
    }
    let n = samples.len() as f64;
    Ok(Evaluation {
        loss: loss / n,
        accuracy: correct as f64 / n,
        scores,
        predictions,
    })
}

/// Per-sample losses and summed gradients. At most one gradient set per
/// worker is alive at a time, and sums run in sample order.
fn batch_gradients(
    model: &CapsNet,
    batch: &[(&Sample, Option<u64>)],
    augment: &AugmentSpec,
) -> Result<(Vec<f64>, Vec<Vec<f64>>), ModelError> {
    let preproc = model.config().preproc;
    let mut sum: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.value.len()]).collect();
    let mut losses = Vec::with_capacity(batch.len());
    for chunk in batch.chunks(par::threads().max(1)) {
        let results = par::map(chunk, |_, (s, aug_seed)| {
            let x = s.tensor(&preproc, aug_seed.map(|seed| (augment, seed)));
            model.loss_and_grads(&x, s.label.index())
        });
        for r in results {
            let sg = r?;
            losses.push(sg.loss);
            for (acc, g) in sum.iter_mut().zip(&sg.grads) {
                acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
    }
    Ok((losses, sum))
}

/// One Adam step on the mean loss of `batch`, without augmentation.
/// Returns the mean loss before the step.
pub fn train_step(model: &mut CapsNet, adam: &mut Adam, batch: &[Sample], lr: f64) -> Result<f64, TrainError> {
    let items: Vec<_> = batch.iter().map(|s| (s, None)).collect();
    let (losses, mut grads) = batch_gradients(model, &items, &AugmentSpec::disabled())?;
    let n = batch.len() as f64;
    grads.iter_mut().flatten().for_each(|g| *g /= n);
    adam.step(model.params_mut(), &grads, lr);
    Ok(losses.iter().sum::<f64>() / n)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub trace: TrainTrace,
    /// Weights at `trace.best_epoch`.
    pub best_model: CapsNet,
}

/// Trains `model` and returns the minimum-validation-loss weights. When
/// `checkpoint` is given it is rewritten at every new minimum.
pub fn train(
    model: CapsNet,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    checkpoint: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    train_observed(model, train_set, val_set, cfg, checkpoint, |_| {})
}

/// As [`train`], calling `observe` after every epoch.
pub fn train_observed(
    mut model: CapsNet,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    checkpoint: Option<&Path>,
    mut observe: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::Data("training part is empty".into()));
    }
    if val_set.is_empty() {
        return Err(TrainError::Data("validation part is empty".into()));
    }
    let mut adam = Adam::new(model.params(), cfg.adam);
    let mut records = Vec::new();
    let mut best: Option<(f64, CapsNet)> = None;
    let mut monitor_best = f64::NAN;
    let mut since_improvement = 0;
    let mut stopped_early = false;

    for epoch in 1..=cfg.epochs {
        let order = epoch_order(train_set.len(), cfg.seed, epoch);
        let mut loss_sum = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let diverged = TrainError::Divergence { epoch, batch: b + 1 };
            let items: Vec<_> = idx
                .iter()
                .map(|&i| (&train_set[i], cfg.augment.enabled.then(|| augment_seed(cfg.seed, epoch, i))))
                .collect();
            let (losses, mut grads) = match batch_gradients(&model, &items, &cfg.augment) {
                Ok(r) => r,
                Err(ModelError::NonFinite(what)) if what != "input" => return Err(diverged),
                Err(e) => return Err(e.into()),
            };
            let n = idx.len() as f64;
            if losses.iter().any(|l| !l.is_finite()) || grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(diverged);
            }
            grads.iter_mut().flatten().for_each(|g| *g /= n);
            adam.step(model.params_mut(), &grads, cfg.lr);
            loss_sum += losses.iter().sum::<f64>();
        }
        let val = match evaluate(&model, val_set) {
            Ok(v) if v.loss.is_finite() => v,
            Ok(_) | Err(TrainError::Model(ModelError::NonFinite(_))) => {
                return Err(TrainError::Divergence {
                    epoch,
                    batch: order.len().div_ceil(cfg.batch_size),
                })
            }
            Err(e) => return Err(e),
        };
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val_loss: val.loss,
            val_acc: val.accuracy,
        };
        records.push(record);
        observe(&record);

        if best.as_ref().is_none_or(|(b, _)| val.loss < *b) {
            if let Some(path) = checkpoint {
                save_checkpoint(&model, path)?;
            }
            best = Some((val.loss, model.clone()));
        }

        if let Some(es) = cfg.early_stop {
            let value = match es.monitor {
                Monitor::ValLoss => val.loss,
                Monitor::ValAcc => val.accuracy,
            };
            let improved = monitor_best.is_nan()
                || match es.monitor {
                    Monitor::ValLoss => value < monitor_best,
                    Monitor::ValAcc => value > monitor_best,
                };
            if improved {
                monitor_best = value;
                since_improvement = 0;
            } else {
                since_improvement += 1;
                if since_improvement >= es.patience {
                    stopped_early = epoch < cfg.epochs;
                    break;
                }
            }
        }
    }

    let mut trace = TrainTrace::from_records(records).expect("at least one epoch");
    trace.stopped_early = stopped_early;
    trace.checkpoint_path = checkpoint.map(Path::to_path_buf);
    let (_, best_model) = best.expect("at least one epoch");
    Ok(TrainOutcome { trace, best_model })
}

#[cfg(test)]
mod tests;

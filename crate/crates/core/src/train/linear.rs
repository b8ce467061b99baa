//! Logistic-regression head on flattened feature maps.

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::capsnet::FeatureMap;
use crate::dataset::{DatasetManifest, Label};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearHeadConfig {
    pub l2: f64,
    pub lr: f64,
    pub epochs: usize,
}

impl Default for LinearHeadConfig {
    fn default() -> Self {
        Self {
            l2: 1e-3,
            lr: 0.1,
            epochs: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub weights: Vec<f64>,
    pub bias: f64,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(-z))` without overflow.
fn softplus_neg(z: f64) -> f64 {
    if z > 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}

impl LinearModel {
    /// Probability of glaucoma.
    pub fn predict_proba(&self, x: &[f64]) -> f64 {
        sigmoid(dot(&self.weights, x) + self.bias)
    }

    pub fn weight_norm(&self) -> f64 {
        dot(&self.weights, &self.weights).sqrt()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean logistic loss plus `l2/2 · |w|²`, with its gradient in `w` and `b`.
/// Targets are 0 or 1.
pub fn logistic_objective(w: &[f64], b: f64, xs: &[Vec<f64>], ys: &[f64], l2: f64) -> (f64, Vec<f64>, f64) {
    let n = xs.len() as f64;
    let mut loss = 0.0;
    let mut gw = vec![0.0; w.len()];
    let mut gb = 0.0;
    for (x, &y) in xs.iter().zip(ys) {
        let z = dot(w, x) + b;
        let signed = if y > 0.5 { z } else { -z };
        loss += softplus_neg(signed);
        let r = sigmoid(z) - y;
        gw.iter_mut().zip(x).for_each(|(g, xi)| *g += r * xi / n);
        gb += r / n;
    }
    loss /= n;
    loss += 0.5 * l2 * dot(w, w);
    gw.iter_mut().zip(w).for_each(|(g, wi)| *g += l2 * wi);
    (loss, gw, gb)
}

/// Full-batch gradient descent from zero. The L2 term is applied as a
/// proximal shrink so large penalties stay stable at any step size.
pub fn fit_logistic(xs: &[Vec<f64>], ys: &[f64], cfg: &LinearHeadConfig) -> LinearModel {
    let dim = xs.first().map_or(0, Vec::len);
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    for _ in 0..cfg.epochs {
        let (_, gw, gb) = logistic_objective(&w, b, xs, ys, 0.0);
        let shrink = 1.0 / (1.0 + cfg.lr * cfg.l2);
        w.iter_mut().zip(&gw).for_each(|(wi, g)| *wi = (*wi - cfg.lr * g) * shrink);
        b -= cfg.lr * gb;
    }
    LinearModel { weights: w, bias: b }
}

/// Flattens the feature record of every id. Lengths must agree.
pub fn flatten_features(features: &FeatureMap, ids: &[String]) -> Result<Vec<Vec<f64>>, TrainError> {
    let mut len = None;
    ids.iter()
        .map(|id| {
            let t = features.get(id).ok_or_else(|| TrainError::MissingFeature(id.clone()))?;
            match len {
                Some(l) if l != t.len() => Err(TrainError::Data(format!(
                    "feature `{id}` has {} values, expected {l}",
                    t.len()
                ))),
                _ => {
                    len = Some(t.len());
                    Ok(t.data().to_vec())
                }
            }
        })
        .collect()
}

/// Fits the head on the training ids of `manifest`.
pub fn train_linear_head(
    features: &FeatureMap,
    manifest: &DatasetManifest,
    train_ids: &[String],
    cfg: &LinearHeadConfig,
) -> Result<LinearModel, TrainError> {
    if train_ids.is_empty() {
        return Err(TrainError::Data("no training ids".into()));
    }
    let xs = flatten_features(features, train_ids)?;
    let ys = train_ids
        .iter()
        .map(|id| {
            manifest
                .get(id)
                .map(|e| if e.label == Label::Glaucoma { 1.0 } else { 0.0 })
                .ok_or_else(|| TrainError::Data(format!("id `{id}` is not in manifest {}", manifest.name)))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(fit_logistic(&xs, &ys, cfg))
}

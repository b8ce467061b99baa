use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{CapsNetConfig, ConvBaseSpec};
use super::ModelError;
use crate::autodiff::kernels::{self, l2_norms};
use crate::autodiff::{ComputeGraph, MarginConstants, NodeId, OpKind};
use crate::tensor::Tensor;

/// A named trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
}

/// `v = (‖s‖² / (1 + ‖s‖²)) · s / ‖s‖`, with the zero vector mapped to zero.
pub fn squash(s: &[f64]) -> Vec<f64> {
    kernels::squash(s, s.len().max(1))
}

/// Routing-by-agreement on fixed predictions `u_hat` [N,J,D].
///
/// Returns the coupling coefficients used at every iteration (each [N·J],
/// rows summing to 1) and the final class capsules [J·D].
pub fn route(u_hat: &[f64], n: usize, j: usize, d: usize, iters: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut logits = vec![0.0; n * j];
    let mut history = Vec::with_capacity(iters);
    let mut v = Vec::new();
    for r in 0..iters {
        let mut c = vec![0.0; n * j];
        for (row_c, row_b) in c.chunks_mut(j).zip(logits.chunks(j)) {
            let max = row_b.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (ci, bi) in row_c.iter_mut().zip(row_b) {
                *ci = (bi - max).exp();
                total += *ci;
            }
            row_c.iter_mut().for_each(|ci| *ci /= total);
        }
        let s = kernels::routing_combine(u_hat, &c, n, j, d);
        v = kernels::squash(&s, d);
        if r + 1 < iters {
            for i in 0..n {
                for cls in 0..j {
                    let pred = &u_hat[(i * j + cls) * d..][..d];
                    let agreement: f64 = pred.iter().zip(&v[cls * d..(cls + 1) * d]).map(|(a, b)| a * b).sum();
                    logits[i * j + cls] += agreement;
                }
            }
        }
        history.push(c);
    }
    (history, v)
}

/// Predicted class (ties go to class 0) and the ROC score
/// `‖v_1‖ / (‖v_0‖ + ‖v_1‖)`, which is 0.5 when both lengths are zero.
pub fn predict_from_norms(norms: &[f64]) -> (usize, f64) {
    let class = usize::from(norms[1] > norms[0]);
    let total = norms[0] + norms[1];
    let score = if total == 0.0 { 0.5 } else { norms[1] / total };
    (class, score)
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub class: usize,
    pub score: f64,
    pub norms: Vec<f64>,
}

/// Everything a forward pass produces besides the graph itself.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Class capsules [J, D].
    pub class_caps: Tensor,
    pub norms: Vec<f64>,
    /// Coupling coefficients per routing iteration, each [N·J].
    pub coupling: Vec<Vec<f64>>,
    pub primary_caps: Tensor,
}

impl ForwardOutput {
    pub fn predict(&self) -> Prediction {
        let (class, score) = predict_from_norms(&self.norms);
        Prediction {
            class,
            score,
            norms: self.norms.clone(),
        }
    }
}

struct Built {
    class_caps: NodeId,
    norms: NodeId,
    primary: NodeId,
    coupling: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CapsNet {
    config: CapsNetConfig,
    params: Vec<Parameter>,
}

fn glorot(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-limit..=limit)).collect();
    Tensor::new(shape, data).expect("positive dims")
}

impl CapsNet {
    /// Builds a network with seed-deterministic fan-scaled uniform weights
    /// and zero biases.
    pub fn new(config: CapsNetConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = Vec::new();
        let conv = |params: &mut Vec<Parameter>, rng: &mut ChaCha8Rng, prefix: &str, f: usize, c: usize, k: usize| {
            params.push(Parameter {
                name: format!("{prefix}.kernel"),
                value: glorot(rng, vec![f, c, k, k], c * k * k, f * k * k),
            });
            params.push(Parameter {
                name: format!("{prefix}.bias"),
                value: Tensor::zeros(&[f]),
            });
        };
        let input = config.input_shape();
        let mut channels = input[0];
        match &config.conv_base {
            ConvBaseSpec::Builtin { layers } => {
                for (i, l) in layers.iter().enumerate() {
                    conv(&mut params, &mut rng, &format!("conv{i}"), l.filters, channels, l.kernel);
                    channels = l.filters;
                }
            }
            ConvBaseSpec::MultiScale { branches } => {
                for (i, l) in branches.iter().enumerate() {
                    conv(&mut params, &mut rng, &format!("branch{i}"), l.filters, input[0], l.kernel);
                }
                channels = branches.iter().map(|l| l.filters).sum();
            }
            ConvBaseSpec::External { .. } => {}
        }
        let p = config.primary_caps;
        conv(&mut params, &mut rng, "primary", p.channels * p.dim, channels, p.kernel);
        let n_caps = config.dimensions()?.primary_capsules;
        let c = config.class_caps;
        params.push(Parameter {
            name: "class.transform".into(),
            value: glorot(&mut rng, vec![n_caps, c.num_classes, c.dim, p.dim], p.dim, c.dim),
        });
        Ok(Self { config, params })
    }

    /// Reassembles a network from stored parameters, checking every shape
    /// against what the config implies.
    pub fn from_parts(config: CapsNetConfig, params: Vec<Tensor>) -> Result<Self, ModelError> {
        let template = Self::new(config.clone())?;
        if template.params.len() != params.len() {
            return Err(ModelError::Config(format!(
                "config implies {} parameter tensors, found {}",
                template.params.len(),
                params.len()
            )));
        }
        let mut out = Vec::with_capacity(params.len());
        for (slot, value) in template.params.into_iter().zip(params) {
            if slot.value.shape() != value.shape() {
                return Err(ModelError::Config(format!(
                    "parameter {} has shape {:?}, config implies {:?}",
                    slot.name,
                    value.shape(),
                    slot.value.shape()
                )));
            }
            out.push(Parameter {
                name: slot.name,
                value,
            });
        }
        Ok(Self { config, params: out })
    }

    pub fn config(&self) -> &CapsNetConfig {
        &self.config
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    fn check_input(&self, input: &Tensor) -> Result<(), ModelError> {
        let want = self.config.input_shape();
        if input.shape() != want {
            return Err(ModelError::Config(format!(
                "input shape {:?} does not match configured {:?}",
                input.shape(),
                want
            )));
        }
        if !input.is_finite() {
            return Err(ModelError::NonFinite("input".into()));
        }
        Ok(())
    }

    fn build<'a>(
        &'a self,
        g: &mut ComputeGraph<'a>,
        input: NodeId,
        frozen_coupling: Option<&[f64]>,
    ) -> Result<(Vec<NodeId>, Built), ModelError> {
        let leaves: Vec<NodeId> = self.params.iter().map(|p| g.leaf_ref(&p.value)).collect();
        let mut next = 0;
        let mut take = || {
            let id = leaves[next];
            next += 1;
            id
        };
        let features = match &self.config.conv_base {
            ConvBaseSpec::External { .. } => input,
            ConvBaseSpec::Builtin { layers } => {
                let mut x = input;
                for l in layers {
                    let (k, b) = (take(), take());
                    let c = g.conv2d(x, k, l.stride)?;
                    let c = g.bias_add(c, b)?;
                    x = g.relu(c);
                }
                x
            }
            ConvBaseSpec::MultiScale { branches } => {
                let mut outs = Vec::with_capacity(branches.len());
                for l in branches {
                    let (k, b) = (take(), take());
                    let c = g.conv2d(input, k, l.stride)?;
                    let c = g.bias_add(c, b)?;
                    outs.push(g.relu(c));
                }
                let h = outs.iter().map(|o| g.value(*o).shape()[1]).min().expect("non-empty");
                let w = outs.iter().map(|o| g.value(*o).shape()[2]).min().expect("non-empty");
                let cropped = outs
                    .into_iter()
                    .map(|o| g.center_crop(o, h, w))
                    .collect::<Result<Vec<_>, _>>()?;
                g.concat(&cropped, 0)?
            }
        };
        let p = self.config.primary_caps;
        let (k, b) = (take(), take());
        let pc = g.conv2d(features, k, p.stride)?;
        let pc = g.bias_add(pc, b)?;
        let caps = g.to_capsules(pc, p.dim)?;
        let primary = g.squash(caps);

        let w = take();
        let u_hat = g.capsule_predict(primary, w)?;
        let shape = g.value(u_hat).shape().to_vec();
        let (n, j, d) = (shape[0], shape[1], shape[2]);
        let (mut coupling, _) = route(g.value(u_hat).data(), n, j, d, self.config.routing_iters);
        let last = match frozen_coupling {
            Some(c) => c.to_vec(),
            None => coupling.last().cloned().expect("routing_iters >= 1"),
        };
        if frozen_coupling.is_some() {
            coupling.clear();
            coupling.push(last.clone());
        }
        let s = g.routing_combine(u_hat, last)?;
        let class_caps = g.squash(s);
        let norms = g.norm(class_caps)?;
        Ok((
            leaves,
            Built {
                class_caps,
                norms,
                primary,
                coupling,
            },
        ))
    }

    pub fn forward(&self, input: &Tensor) -> Result<ForwardOutput, ModelError> {
        self.check_input(input)?;
        let mut g = ComputeGraph::new();
        let x = g.leaf(input.clone());
        let (_, built) = self.build(&mut g, x, None)?;
        let out = ForwardOutput {
            class_caps: g.value(built.class_caps).clone(),
            norms: g.value(built.norms).data().to_vec(),
            coupling: built.coupling,
            primary_caps: g.value(built.primary).clone(),
        };
        if !out.class_caps.is_finite() {
            return Err(ModelError::NonFinite("class capsules".into()));
        }
        Ok(out)
    }

    pub fn predict(&self, input: &Tensor) -> Result<Prediction, ModelError> {
        Ok(self.forward(input)?.predict())
    }

    pub fn loss(&self, input: &Tensor, label: usize) -> Result<f64, ModelError> {
        self.loss_with_coupling(input, label, None)
    }

    /// Loss with the final coupling coefficients optionally held fixed.
    pub fn loss_with_coupling(&self, input: &Tensor, label: usize, coupling: Option<&[f64]>) -> Result<f64, ModelError> {
        self.check_input(input)?;
        let mut g = ComputeGraph::new();
        let x = g.leaf(input.clone());
        let (_, built) = self.build(&mut g, x, coupling)?;
        let loss = g.margin_loss(built.norms, label, self.margin())?;
        Ok(g.value(loss).item())
    }

    /// Class-capsule norms with the final coupling coefficients optionally
    /// held fixed.
    pub fn norms_with_coupling(&self, input: &Tensor, coupling: Option<&[f64]>) -> Result<Vec<f64>, ModelError> {
        self.check_input(input)?;
        let mut g = ComputeGraph::new();
        let x = g.leaf(input.clone());
        let (_, built) = self.build(&mut g, x, coupling)?;
        Ok(g.value(built.norms).data().to_vec())
    }

    fn margin(&self) -> MarginConstants {
        self.config.margin.into()
    }

    /// Margin loss, per-parameter gradients (declaration order), the
    /// prediction, and the final coupling coefficients.
    pub fn loss_and_grads(&self, input: &Tensor, label: usize) -> Result<SampleGradients, ModelError> {
        self.loss_and_grads_with(input, label, None)
    }

    #[doc(hidden)]
    pub fn loss_and_grads_with(
        &self,
        input: &Tensor,
        label: usize,
        corrupt: Option<OpKind>,
    ) -> Result<SampleGradients, ModelError> {
        self.check_input(input)?;
        if label >= self.config.class_caps.num_classes {
            return Err(ModelError::Usage(format!("label {label} out of range")));
        }
        let mut g = ComputeGraph::new();
        g.corrupt_gradient_rule(corrupt);
        let x = g.leaf(input.clone());
        let (leaves, built) = self.build(&mut g, x, None)?;
        let loss = g.margin_loss(built.norms, label, self.margin())?;
        g.backward(loss)?;
        let loss_value = g.value(loss).item();
        let norms = g.value(built.norms).data().to_vec();
        let grads = leaves
            .iter()
            .zip(&self.params)
            .map(|(id, p)| g.take_grad(*id).unwrap_or_else(|| vec![0.0; p.value.len()]))
            .collect();
        let (class, score) = predict_from_norms(&norms);
        Ok(SampleGradients {
            loss: loss_value,
            grads,
            prediction: Prediction { class, score, norms },
            coupling: built.coupling.last().cloned().unwrap_or_default(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct SampleGradients {
    pub loss: f64,
    pub grads: Vec<Vec<f64>>,
    pub prediction: Prediction,
    pub coupling: Vec<f64>,
}

/// Capsule lengths of a [J, D] tensor.
pub fn capsule_norms(v: &Tensor) -> Vec<f64> {
    l2_norms(v.data(), *v.shape().last().expect("rank >= 1"))
}

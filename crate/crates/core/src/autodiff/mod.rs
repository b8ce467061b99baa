//! Tape-based reverse-mode differentiation.
//!
//! A [`ComputeGraph`] records every op in creation order, which is a valid
//! topological order because an op can only reference nodes that already
//! exist. [`ComputeGraph::backward`] walks the tape in reverse.

pub mod kernels;

use std::borrow::Cow;
use std::fmt;
use std::str::FromStr;

use crate::tensor::{Result, Tensor, TensorError};
use kernels::ConvGeometry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Names of the differentiable ops; used by the gradient-corruption hook.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Conv2d,
    BiasAdd,
    Relu,
    Softmax,
    Add,
    Mul,
    Scale,
    Reshape,
    Concat,
    CenterCrop,
    Norm,
    Squash,
    ToCapsules,
    CapsulePredict,
    RoutingCombine,
    Sum,
    MarginLoss,
}

impl OpKind {
    pub const ALL: [OpKind; 18] = [
        OpKind::Leaf,
        OpKind::Conv2d,
        OpKind::BiasAdd,
        OpKind::Relu,
        OpKind::Softmax,
        OpKind::Add,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Reshape,
        OpKind::Concat,
        OpKind::CenterCrop,
        OpKind::Norm,
        OpKind::Squash,
        OpKind::ToCapsules,
        OpKind::CapsulePredict,
        OpKind::RoutingCombine,
        OpKind::Sum,
        OpKind::MarginLoss,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Conv2d => "conv2d",
            OpKind::BiasAdd => "bias_add",
            OpKind::Relu => "relu",
            OpKind::Softmax => "softmax",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Reshape => "reshape",
            OpKind::Concat => "concat",
            OpKind::CenterCrop => "center_crop",
            OpKind::Norm => "norm",
            OpKind::Squash => "squash",
            OpKind::ToCapsules => "to_capsules",
            OpKind::CapsulePredict => "capsule_predict",
            OpKind::RoutingCombine => "routing_combine",
            OpKind::Sum => "sum",
            OpKind::MarginLoss => "margin_loss",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown op `{s}`"))
    }
}

/// Constants of the capsule margin loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginConstants {
    pub m_plus: f64,
    pub m_minus: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d { input: NodeId, kernel: NodeId, geom: ConvGeometry },
    BiasAdd { input: NodeId, bias: NodeId },
    Relu(NodeId),
    Softmax { input: NodeId, axis: usize },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Reshape(NodeId),
    Concat { inputs: Vec<NodeId>, axis: usize },
    CenterCrop { input: NodeId, top: usize, left: usize },
    Norm(NodeId),
    Squash(NodeId),
    ToCapsules { input: NodeId, dim: usize },
    CapsulePredict { u: NodeId, w: NodeId },
    RoutingCombine { u_hat: NodeId, coeffs: Vec<f64> },
    Sum(NodeId),
    MarginLoss { norms: NodeId, label: usize, consts: MarginConstants },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::BiasAdd { .. } => OpKind::BiasAdd,
            Op::Relu(_) => OpKind::Relu,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Concat { .. } => OpKind::Concat,
            Op::CenterCrop { .. } => OpKind::CenterCrop,
            Op::Norm(_) => OpKind::Norm,
            Op::Squash(_) => OpKind::Squash,
            Op::ToCapsules { .. } => OpKind::ToCapsules,
            Op::CapsulePredict { .. } => OpKind::CapsulePredict,
            Op::RoutingCombine { .. } => OpKind::RoutingCombine,
            Op::Sum(_) => OpKind::Sum,
            Op::MarginLoss { .. } => OpKind::MarginLoss,
        }
    }
}

struct Node<'a> {
    op: Op,
    value: Cow<'a, Tensor>,
}

/// Dynamic computation graph. Leaves may borrow their tensors (parameters)
/// for the lifetime `'a`; everything else is owned.
pub struct ComputeGraph<'a> {
    nodes: Vec<Node<'a>>,
    leaf_grads: Vec<Option<Vec<f64>>>,
    parallel: bool,
    corrupt: Option<OpKind>,
}

impl Default for ComputeGraph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::Shape { op, detail }
}

impl<'a> ComputeGraph<'a> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            parallel: false,
            corrupt: None,
        }
    }

    /// Enables data-parallel convolution kernels. Results stay bit-identical.
    pub fn with_parallel(mut self, parallel: bool) -> Self {
        self.parallel = parallel;
        self
    }

    /// Test hook: scales every input gradient of `kind` by 1.5.
    #[doc(hidden)]
    pub fn corrupt_gradient_rule(&mut self, kind: Option<OpKind>) {
        self.corrupt = kind;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn kind(&self, id: NodeId) -> OpKind {
        self.nodes[id.0].op.kind()
    }

    /// Accumulated gradient of a leaf after [`backward`](Self::backward).
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.leaf_grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn take_grad(&mut self, id: NodeId) -> Option<Vec<f64>> {
        self.leaf_grads.get_mut(id.0).and_then(Option::take)
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            op,
            value: Cow::Owned(value),
        });
        self.leaf_grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    /// A leaf that borrows its tensor instead of copying it.
    pub fn leaf_ref(&mut self, value: &'a Tensor) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: Cow::Borrowed(value),
        });
        self.leaf_grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, stride: usize) -> Result<NodeId> {
        let (x, k) = (self.value(input), self.value(kernel));
        if stride == 0 {
            return Err(TensorError::Config {
                op: "conv2d",
                detail: "stride must be positive".into(),
            });
        }
        if x.rank() != 3 || k.rank() != 4 || x.shape()[0] != k.shape()[1] {
            return Err(TensorError::Config {
                op: "conv2d",
                detail: format!("input {:?} incompatible with kernels {:?}", x.shape(), k.shape()),
            });
        }
        let geom = ConvGeometry {
            channels: x.shape()[0],
            height: x.shape()[1],
            width: x.shape()[2],
            filters: k.shape()[0],
            kernel_h: k.shape()[2],
            kernel_w: k.shape()[3],
            stride,
        };
        if geom.kernel_h > geom.height || geom.kernel_w > geom.width {
            return Err(TensorError::Config {
                op: "conv2d",
                detail: format!(
                    "kernel {}x{} larger than input {}x{}",
                    geom.kernel_h, geom.kernel_w, geom.height, geom.width
                ),
            });
        }
        let out = kernels::conv2d_forward(&geom, x.data(), k.data(), self.parallel);
        let value = Tensor::new(vec![geom.filters, geom.out_h(), geom.out_w()], out)?;
        Ok(self.push(Op::Conv2d { input, kernel, geom }, value))
    }

    /// Adds `bias[c]` to every element of channel `c` (axis 0).
    pub fn bias_add(&mut self, input: NodeId, bias: NodeId) -> Result<NodeId> {
        let (x, b) = (self.value(input), self.value(bias));
        if b.rank() != 1 || b.shape()[0] != x.shape()[0] {
            return Err(shape_err("bias_add", format!("bias {:?} for input {:?}", b.shape(), x.shape())));
        }
        let inner = x.len() / x.shape()[0];
        let mut out = x.data().to_vec();
        for (c, chunk) in out.chunks_mut(inner).enumerate() {
            let bc = b.data()[c];
            chunk.iter_mut().for_each(|v| *v += bc);
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.push(Op::BiasAdd { input, bias }, value))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(Op::Relu(x), value)
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let value = self.value(x).softmax(axis)?;
        Ok(self.push(Op::Softmax { input: x, axis }, value))
    }

    fn binary(&mut self, a: NodeId, b: NodeId, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), value))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(Op::Scale(x, factor), value)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(Op::Reshape(x), value))
    }

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = inputs
            .first()
            .ok_or_else(|| shape_err("concat", "no inputs".into()))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(TensorError::Config {
                op: "concat",
                detail: format!("axis {axis} out of range for {base:?}"),
            });
        }
        let mut total = 0;
        for id in inputs {
            let s = self.value(*id).shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(k, (a, b))| k == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for id in inputs {
                let t = self.value(*id);
                let block = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            value,
        ))
    }

    /// Crops [C,H,W] to [C,h,w] around the spatial center.
    pub fn center_crop(&mut self, x: NodeId, h: usize, w: usize) -> Result<NodeId> {
        let t = self.value(x);
        if t.rank() != 3 || h > t.shape()[1] || w > t.shape()[2] || h == 0 || w == 0 {
            return Err(shape_err("center_crop", format!("cannot crop {:?} to {h}x{w}", t.shape())));
        }
        let (c, ih, iw) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let (top, left) = ((ih - h) / 2, (iw - w) / 2);
        let mut data = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for y in 0..h {
                let start = (ch * ih + top + y) * iw + left;
                data.extend_from_slice(&t.data()[start..start + w]);
            }
        }
        let value = Tensor::new(vec![c, h, w], data)?;
        Ok(self.push(Op::CenterCrop { input: x, top, left }, value))
    }

    /// L2 norm over the last axis; the result drops that axis.
    pub fn norm(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        let d = *t.shape().last().expect("rank >= 1");
        let norms = kernels::l2_norms(t.data(), d);
        let shape = if t.rank() > 1 {
            t.shape()[..t.rank() - 1].to_vec()
        } else {
            vec![1]
        };
        let value = Tensor::new(shape, norms)?;
        Ok(self.push(Op::Norm(x), value))
    }

    /// Capsule squash over the last axis.
    pub fn squash(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let d = *t.shape().last().expect("rank >= 1");
        let value = Tensor::new(t.shape().to_vec(), kernels::squash(t.data(), d)).expect("same shape");
        self.push(Op::Squash(x), value)
    }

    /// Regroups conv channels [C·D, H, W] into capsules [C·H·W, D]; channel
    /// `c·D + d` holds component `d` of capsule type `c`.
    pub fn to_capsules(&mut self, x: NodeId, dim: usize) -> Result<NodeId> {
        let t = self.value(x);
        if t.rank() != 3 || dim == 0 || t.shape()[0] % dim != 0 {
            return Err(shape_err("to_capsules", format!("{:?} with capsule dim {dim}", t.shape())));
        }
        let (ch, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let types = ch / dim;
        let mut data = vec![0.0; t.len()];
        for ty in 0..types {
            for d in 0..dim {
                let plane = &t.data()[(ty * dim + d) * h * w..][..h * w];
                for (p, v) in plane.iter().enumerate() {
                    data[(ty * h * w + p) * dim + d] = *v;
                }
            }
        }
        let value = Tensor::new(vec![types * h * w, dim], data)?;
        Ok(self.push(Op::ToCapsules { input: x, dim }, value))
    }

    /// Per-pair matrix-vector products: `u` [N,Din], `w` [N,J,Dout,Din] -> [N,J,Dout].
    pub fn capsule_predict(&mut self, u: NodeId, w: NodeId) -> Result<NodeId> {
        let (tu, tw) = (self.value(u), self.value(w));
        if tu.rank() != 2 || tw.rank() != 4 || tw.shape()[0] != tu.shape()[0] || tw.shape()[3] != tu.shape()[1] {
            return Err(shape_err(
                "capsule_predict",
                format!("capsules {:?} with transforms {:?}", tu.shape(), tw.shape()),
            ));
        }
        let (n, j, d_out, d_in) = (tw.shape()[0], tw.shape()[1], tw.shape()[2], tw.shape()[3]);
        let out = kernels::capsule_predict(tu.data(), tw.data(), n, j, d_out, d_in);
        let value = Tensor::new(vec![n, j, d_out], out)?;
        Ok(self.push(Op::CapsulePredict { u, w }, value))
    }

    /// `s[j] = Σ_i c[i,j] û[i,j]` with the coupling coefficients held constant.
    pub fn routing_combine(&mut self, u_hat: NodeId, coeffs: Vec<f64>) -> Result<NodeId> {
        let t = self.value(u_hat);
        if t.rank() != 3 || coeffs.len() != t.shape()[0] * t.shape()[1] {
            return Err(shape_err(
                "routing_combine",
                format!("{} coefficients for predictions {:?}", coeffs.len(), t.shape()),
            ));
        }
        let (n, j, d) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let value = Tensor::new(vec![j, d], kernels::routing_combine(t.data(), &coeffs, n, j, d))?;
        Ok(self.push(Op::RoutingCombine { u_hat, coeffs }, value))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().sum();
        self.push(Op::Sum(x), Tensor::scalar(s))
    }

    /// Margin loss over a vector of per-class capsule lengths.
    pub fn margin_loss(&mut self, norms: NodeId, label: usize, consts: MarginConstants) -> Result<NodeId> {
        let t = self.value(norms);
        if label >= t.len() {
            return Err(TensorError::Config {
                op: "margin_loss",
                detail: format!("label {label} out of range for {} classes", t.len()),
            });
        }
        let loss = margin_loss_value(t.data(), label, consts);
        Ok(self.push(Op::MarginLoss { norms, label, consts }, Tensor::scalar(loss)))
    }

    /// Reverse pass from a scalar node. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let mut contributions = self.input_grads(&node.op, &node.value, &g);
            if self.corrupt == Some(node.op.kind()) {
                for (_, d) in contributions.iter_mut() {
                    d.iter_mut().for_each(|v| *v *= 1.5);
                }
            }
            if matches!(node.op, Op::Leaf) {
                let slot = self.leaf_grads[idx].get_or_insert_with(|| vec![0.0; g.len()]);
                for (a, b) in slot.iter_mut().zip(&g) {
                    *a += b;
                }
                continue;
            }
            for (input, delta) in contributions {
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(delta),
                }
            }
        }
        Ok(())
    }

    fn input_grads(&self, op: &Op, out: &Tensor, g: &[f64]) -> Vec<(NodeId, Vec<f64>)> {
        match op {
            Op::Leaf => Vec::new(),
            Op::Conv2d { input, kernel, geom } => {
                let (din, dk) = kernels::conv2d_backward(
                    geom,
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    g,
                    self.parallel,
                );
                vec![(*input, din), (*kernel, dk)]
            }
            Op::BiasAdd { input, bias } => {
                let channels = self.value(*bias).len();
                let inner = g.len() / channels;
                let db = g.chunks(inner).map(|c| c.iter().sum()).collect();
                vec![(*input, g.to_vec()), (*bias, db)]
            }
            Op::Relu(x) => {
                let d = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                vec![(*x, d)]
            }
            Op::Softmax { input, axis } => {
                let (outer, len, inner) = out.axis_split(*axis, "softmax").expect("validated");
                let y = out.data();
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let dot: f64 = (0..len).map(|k| y[at(k)] * g[at(k)]).sum();
                        for k in 0..len {
                            d[at(k)] = y[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                vec![(*input, d)]
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let da = vb.iter().zip(g).map(|(y, gv)| y * gv).collect();
                let db = va.iter().zip(g).map(|(x, gv)| x * gv).collect();
                vec![(*a, da), (*b, db)]
            }
            Op::Scale(x, f) => vec![(*x, g.iter().map(|v| v * f).collect())],
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::Concat { inputs, axis } => {
                let shape = out.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let mut parts: Vec<Vec<f64>> = inputs
                    .iter()
                    .map(|id| Vec::with_capacity(self.value(*id).len()))
                    .collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (k, id) in inputs.iter().enumerate() {
                        let block = self.value(*id).shape()[*axis] * inner;
                        parts[k].extend_from_slice(&g[pos..pos + block]);
                        pos += block;
                    }
                }
                inputs.iter().copied().zip(parts).collect()
            }
            Op::CenterCrop { input, top, left } => {
                let src = self.value(*input).shape();
                let (ih, iw) = (src[1], src[2]);
                let (c, h, w) = (out.shape()[0], out.shape()[1], out.shape()[2]);
                let mut d = vec![0.0; c * ih * iw];
                for ch in 0..c {
                    for y in 0..h {
                        let start = (ch * ih + top + y) * iw + left;
                        d[start..start + w].copy_from_slice(&g[(ch * h + y) * w..][..w]);
                    }
                }
                vec![(*input, d)]
            }
            Op::Norm(x) => {
                let xv = self.value(*x);
                let dim = *xv.shape().last().expect("rank >= 1");
                let mut d = vec![0.0; xv.len()];
                for (k, (dx, s)) in d.chunks_mut(dim).zip(xv.data().chunks(dim)).enumerate() {
                    let n = out.data()[k];
                    if n > 0.0 {
                        for (a, b) in dx.iter_mut().zip(s) {
                            *a = g[k] * b / n;
                        }
                    }
                }
                vec![(*x, d)]
            }
            Op::Squash(x) => {
                let xv = self.value(*x);
                let dim = *xv.shape().last().expect("rank >= 1");
                vec![(*x, kernels::squash_backward(xv.data(), g, dim))]
            }
            Op::ToCapsules { input, dim } => {
                let src = self.value(*input).shape();
                let (h, w) = (src[1], src[2]);
                let types = src[0] / dim;
                let mut d = vec![0.0; g.len()];
                for ty in 0..types {
                    for k in 0..*dim {
                        let plane = &mut d[(ty * dim + k) * h * w..][..h * w];
                        for (p, v) in plane.iter_mut().enumerate() {
                            *v = g[(ty * h * w + p) * dim + k];
                        }
                    }
                }
                vec![(*input, d)]
            }
            Op::CapsulePredict { u, w } => {
                let (tu, tw) = (self.value(*u), self.value(*w));
                let (n, j, d_out, d_in) = (tw.shape()[0], tw.shape()[1], tw.shape()[2], tw.shape()[3]);
                let mut du = vec![0.0; tu.len()];
                let mut dw = vec![0.0; tw.len()];
                for i in 0..n {
                    let ui = &tu.data()[i * d_in..(i + 1) * d_in];
                    for cls in 0..j {
                        for o in 0..d_out {
                            let gv = g[(i * j + cls) * d_out + o];
                            let base = ((i * j + cls) * d_out + o) * d_in;
                            for k in 0..d_in {
                                dw[base + k] = gv * ui[k];
                                du[i * d_in + k] += gv * tw.data()[base + k];
                            }
                        }
                    }
                }
                vec![(*u, du), (*w, dw)]
            }
            Op::RoutingCombine { u_hat, coeffs } => {
                let t = self.value(*u_hat);
                let (n, j, d) = (t.shape()[0], t.shape()[1], t.shape()[2]);
                let mut du = vec![0.0; t.len()];
                for i in 0..n {
                    for cls in 0..j {
                        let c = coeffs[i * j + cls];
                        for k in 0..d {
                            du[(i * j + cls) * d + k] = c * g[cls * d + k];
                        }
                    }
                }
                vec![(*u_hat, du)]
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; self.value(*x).len()])],
            Op::MarginLoss { norms, label, consts } => {
                let d = margin_loss_grad(self.value(*norms).data(), *label, *consts)
                    .into_iter()
                    .map(|v| v * g[0])
                    .collect();
                vec![(*norms, d)]
            }
        }
    }
}

pub fn margin_loss_value(norms: &[f64], label: usize, c: MarginConstants) -> f64 {
    norms
        .iter()
        .enumerate()
        .map(|(k, &n)| {
            if k == label {
                (c.m_plus - n).max(0.0).powi(2)
            } else {
                c.lambda * (n - c.m_minus).max(0.0).powi(2)
            }
        })
        .sum()
}

fn margin_loss_grad(norms: &[f64], label: usize, c: MarginConstants) -> Vec<f64> {
    norms
        .iter()
        .enumerate()
        .map(|(k, &n)| {
            if k == label {
                -2.0 * (c.m_plus - n).max(0.0)
            } else {
                2.0 * c.lambda * (n - c.m_minus).max(0.0)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests;

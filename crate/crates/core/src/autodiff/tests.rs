use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    // Keep away from the relu/hinge kinks so central differences stay smooth.
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = rng.gen_range(-1.0..1.0);
            if v.abs() > 1e-2 {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Reduces an arbitrary output to a scalar through fixed random weights so
/// every output element contributes to the loss.
fn weighted_sum(g: &mut ComputeGraph, out: NodeId, seed: u64) -> NodeId {
    let shape = g.value(out).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random_tensor(&mut rng, &shape);
    let wid = g.leaf(w);
    let prod = g.mul(out, wid).unwrap();
    g.sum(prod)
}

fn eval<F>(inputs: &[Tensor], build: &F) -> f64
where
    F: Fn(&mut ComputeGraph, &[NodeId]) -> NodeId,
{
    let mut g = ComputeGraph::new();
    let ids: Vec<_> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &ids);
    let loss = weighted_sum(&mut g, out, 99);
    g.value(loss).item()
}

/// Central-difference oracle, independent of the backward rules.
fn finite_difference<F>(inputs: &[Tensor], build: &F) -> Vec<Vec<f64>>
where
    F: Fn(&mut ComputeGraph, &[NodeId]) -> NodeId,
{
    let h = 1e-5;
    let mut out = Vec::new();
    for k in 0..inputs.len() {
        let mut grads = Vec::with_capacity(inputs[k].len());
        for e in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[e] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[e] -= h;
            grads.push((eval(&plus, build) - eval(&minus, build)) / (2.0 * h));
        }
        out.push(grads);
    }
    out
}

fn check_op<F>(inputs: Vec<Tensor>, build: F)
where
    F: Fn(&mut ComputeGraph, &[NodeId]) -> NodeId,
{
    let mut g = ComputeGraph::new();
    let ids: Vec<_> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &ids);
    let loss = weighted_sum(&mut g, out, 99);
    g.backward(loss).unwrap();
    let numeric = finite_difference(&inputs, &build);
    for (k, id) in ids.iter().enumerate() {
        let zeros = vec![0.0; inputs[k].len()];
        let analytic = g.grad(*id).unwrap_or(&zeros);
        for (a, f) in analytic.iter().zip(&numeric[k]) {
            let rel = (a - f).abs() / f.abs().max(1e-8);
            assert!(
                rel < 1e-4 || (a - f).abs() < 1e-10,
                "input {k}: analytic {a} vs numeric {f} (rel {rel:e})"
            );
        }
    }
}

#[test]
fn conv2d_all_ones() {
    let mut g = ComputeGraph::new();
    let x = g.leaf(Tensor::full(&[1, 3, 3], 1.0));
    let k = g.leaf(Tensor::full(&[1, 1, 2, 2], 1.0));
    let y = g.conv2d(x, k, 1).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 2, 2]);
    assert!(g.value(y).data().iter().all(|&v| v == 4.0));
}

#[test]
fn conv2d_stride_two_dims() {
    let mut g = ComputeGraph::new();
    let x = g.leaf(Tensor::full(&[1, 4, 4], 1.0));
    let k = g.leaf(Tensor::full(&[1, 1, 2, 2], 1.0));
    let y = g.conv2d(x, k, 2).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 2, 2]);
}

#[test]
fn conv2d_errors() {
    let mut g = ComputeGraph::new();
    let x = g.leaf(Tensor::full(&[1, 4, 4], 1.0));
    let k = g.leaf(Tensor::full(&[1, 1, 2, 2], 1.0));
    assert!(matches!(g.conv2d(x, k, 0), Err(TensorError::Config { .. })));
    let big = g.leaf(Tensor::full(&[1, 1, 5, 5], 1.0));
    assert!(g.conv2d(x, big, 1).is_err());
    let wrong_c = g.leaf(Tensor::full(&[1, 2, 2, 2], 1.0));
    assert!(g.conv2d(x, wrong_c, 1).is_err());
}

/// Six nested loops straight from the definition.
fn conv_oracle(x: &Tensor, k: &Tensor, stride: usize) -> Vec<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (f, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let (oh, ow) = ((h - kh) / stride + 1, (w - kw) / stride + 1);
    let mut out = vec![0.0; f * oh * ow];
    for fi in 0..f {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = 0.0;
                for ci in 0..c {
                    for a in 0..kh {
                        for b in 0..kw {
                            acc += x.data()[(ci * h + i * stride + a) * w + j * stride + b]
                                * k.data()[((fi * c + ci) * kh + a) * kw + b];
                        }
                    }
                }
                out[(fi * oh + i) * ow + j] = acc;
            }
        }
    }
    out
}

#[test]
fn conv2d_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (shape, kshape, stride) in [
        ([2, 5, 5], [3, 2, 3, 3], 1),
        ([3, 8, 8], [4, 3, 3, 3], 2),
        ([1, 8, 7], [2, 1, 5, 3], 3),
    ] {
        let x = random_tensor(&mut rng, &shape);
        let k = random_tensor(&mut rng, &kshape);
        let oracle = conv_oracle(&x, &k, stride);
        let mut g = ComputeGraph::new();
        let xi = g.leaf(x);
        let ki = g.leaf(k);
        let y = g.conv2d(xi, ki, stride).unwrap();
        for (a, b) in g.value(y).data().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn relu_forward_and_subgradient() {
    let mut g = ComputeGraph::new();
    let x = g.leaf(Tensor::from_slice(&[-1.0, 0.0, 2.0]));
    let y = g.relu(x);
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 1.0]);

    let mut g = ComputeGraph::new();
    let x = g.leaf(Tensor::full(&[2, 2], -3.0));
    let y = g.relu(x);
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn relu_gradient_indicator() {
    let mut g = ComputeGraph::new();
    let x = g.leaf(Tensor::from_slice(&[-1.0, 2.0]));
    let y = g.relu(x);
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0]);
}

#[test]
fn backward_sum_gives_ones() {
    let mut g = ComputeGraph::new();
    let x = g.leaf(Tensor::full(&[2, 3, 4], 0.7));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().iter().all(|&v| v == 1.0));
}

#[test]
fn backward_square_and_accumulation() {
    let mut g = ComputeGraph::new();
    let x = g.leaf(Tensor::from_slice(&[3.0]));
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[6.0]);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[12.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = ComputeGraph::new();
    let x = g.leaf(Tensor::full(&[2], 1.0));
    assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
}

#[test]
fn fd_conv2d_and_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs = vec![
        random_tensor(&mut rng, &[2, 5, 5]),
        random_tensor(&mut rng, &[3, 2, 3, 3]),
        random_tensor(&mut rng, &[3]),
    ];
    check_op(inputs, |g, ids| {
        let c = g.conv2d(ids[0], ids[1], 2).unwrap();
        g.bias_add(c, ids[2]).unwrap()
    });
}

#[test]
fn fd_relu_add_mul_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let inputs = vec![random_tensor(&mut rng, &[3, 4]), random_tensor(&mut rng, &[3, 4])];
    check_op(inputs, |g, ids| {
        let r = g.relu(ids[0]);
        let a = g.add(r, ids[1]).unwrap();
        let m = g.mul(a, ids[0]).unwrap();
        g.scale(m, -0.75)
    });
}

#[test]
fn fd_softmax_both_axes() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for axis in 0..2 {
        check_op(vec![random_tensor(&mut rng, &[3, 4])], move |g, ids| g.softmax(ids[0], axis).unwrap());
    }
}

#[test]
fn fd_reshape_concat_crop() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inputs = vec![random_tensor(&mut rng, &[2, 5, 5]), random_tensor(&mut rng, &[1, 3, 3])];
    check_op(inputs, |g, ids| {
        let c = g.center_crop(ids[0], 3, 3).unwrap();
        let cat = g.concat(&[c, ids[1]], 0).unwrap();
        g.reshape(cat, &[9, 3]).unwrap()
    });
    let inputs = vec![random_tensor(&mut rng, &[2, 3]), random_tensor(&mut rng, &[2, 2])];
    check_op(inputs, |g, ids| g.concat(&[ids[0], ids[1]], 1).unwrap());
}

#[test]
fn fd_norm_and_squash() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    check_op(vec![random_tensor(&mut rng, &[4, 3])], |g, ids| g.norm(ids[0]).unwrap());
    check_op(vec![random_tensor(&mut rng, &[4, 3])], |g, ids| g.squash(ids[0]));
    let big = Tensor::new(vec![2, 2], vec![3.0, -4.0, 10.0, 2.0]).unwrap();
    check_op(vec![big], |g, ids| g.squash(ids[0]));
}

#[test]
fn fd_capsule_predict_and_combine() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inputs = vec![random_tensor(&mut rng, &[3, 4]), random_tensor(&mut rng, &[3, 2, 5, 4])];
    let coeffs: Vec<f64> = (0..6).map(|i| 0.1 + 0.13 * i as f64).collect();
    check_op(inputs, move |g, ids| {
        let p = g.capsule_predict(ids[0], ids[1]).unwrap();
        g.routing_combine(p, coeffs.clone()).unwrap()
    });
}

#[test]
fn fd_to_capsules() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    check_op(vec![random_tensor(&mut rng, &[6, 2, 3])], |g, ids| g.to_capsules(ids[0], 3).unwrap());
}

#[test]
fn fd_margin_loss() {
    let consts = MarginConstants {
        m_plus: 0.9,
        m_minus: 0.1,
        lambda: 0.5,
    };
    for label in 0..2 {
        let norms = Tensor::from_slice(&[0.35, 0.62]);
        check_op(vec![norms], move |g, ids| g.margin_loss(ids[0], label, consts).unwrap());
    }
}

#[test]
fn to_capsules_layout() {
    let mut g = ComputeGraph::new();
    // 2 capsule types of dim 2 on a 1x2 grid.
    let x = g.leaf(Tensor::new(vec![4, 1, 2], vec![0., 1., 10., 11., 20., 21., 30., 31.]).unwrap());
    let c = g.to_capsules(x, 2).unwrap();
    assert_eq!(g.value(c).shape(), &[4, 2]);
    assert_eq!(g.value(c).data(), &[0., 10., 1., 11., 20., 30., 21., 31.]);
}

#[test]
fn corrupted_rule_changes_gradient() {
    let build = |g: &mut ComputeGraph| {
        let x = g.leaf(Tensor::from_slice(&[1.0, -2.0, 3.0]));
        let r = g.relu(x);
        let s = g.sum(r);
        (x, s)
    };
    let mut clean = ComputeGraph::new();
    let (x, s) = build(&mut clean);
    clean.backward(s).unwrap();
    let mut bad = ComputeGraph::new();
    bad.corrupt_gradient_rule(Some(OpKind::Relu));
    let (y, t) = build(&mut bad);
    bad.backward(t).unwrap();
    assert_ne!(clean.grad(x), bad.grad(y));
}

#[test]
fn op_kind_names_round_trip() {
    for k in OpKind::ALL {
        assert_eq!(k.name().parse::<OpKind>().unwrap(), k);
    }
    assert!("bogus".parse::<OpKind>().is_err());
}

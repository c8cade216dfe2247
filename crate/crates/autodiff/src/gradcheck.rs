//! Central finite-difference checks of every differentiable op, in f64.
//!
//! Each op gets randomized instances (shapes, strides, padding and bias vary per case);
//! the analytic vector-Jacobian product against a random cotangent is compared with
//! central differences at up to 40 coordinates per leaf.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::exec::Executor;
use crate::graph::{Graph, NodeId, OpKind};
use crate::kernels::Padding;
use crate::tensor::Tensor;

/// Every op kind that carries a gradient rule.
pub const DIFFERENTIABLE_OPS: [OpKind; 21] = [
    OpKind::Add,
    OpKind::Sub,
    OpKind::Mul,
    OpKind::Affine,
    OpKind::Conv2d,
    OpKind::TransposedConv2d,
    OpKind::InstanceNorm,
    OpKind::Relu,
    OpKind::LeakyRelu,
    OpKind::Exp,
    OpKind::Clamp,
    OpKind::ConcatChannels,
    OpKind::SliceChannels,
    OpKind::GlobalAvgPool,
    OpKind::TileSpatial,
    OpKind::ComplexDft2,
    OpKind::ComplexIdft2,
    OpKind::ComplexAbs,
    OpKind::RowMaskMix,
    OpKind::ReduceSum,
    OpKind::ReduceMean,
];

const STEP: f64 = 1e-5;
const MAX_COORDS: usize = 40;

/// A graph whose `output` node is checked against its leaves.
pub struct Case {
    pub graph: Graph<f64>,
    pub leaves: Vec<(NodeId, Tensor<f64>)>,
    /// Leaves whose gradient is checked; selector inputs such as masks are left out.
    pub checked: Vec<usize>,
    pub output: NodeId,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OpReport {
    pub kind: OpKind,
    pub instances: usize,
    pub worst_relative_error: f64,
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], away_from: &[f64]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = rng.gen_range(-1.5..1.5);
            // keep clear of kinks so the central difference stays on one side
            if away_from.iter().all(|k| (v - k).abs() > 0.02) {
                break v;
            }
        })
        .collect();
    Tensor::from_vec(shape, data).expect("length matches")
}

fn weighted_output(case: &Case, leaves: &[(NodeId, Tensor<f64>)], weights: &Tensor<f64>) -> f64 {
    let mut exec = Executor::new(&case.graph);
    for (id, t) in leaves {
        exec.bind(*id, t).expect("leaf shapes match");
    }
    exec.forward().expect("forward");
    exec.value(case.output)
        .expect("output computed")
        .data()
        .iter()
        .zip(weights.data())
        .map(|(a, b)| a * b)
        .sum()
}

/// Relative L2 error between analytic and numeric gradients over all checked leaves.
pub fn relative_error(case: &Case, rng: &mut ChaCha8Rng) -> f64 {
    let out_shape = case.graph.shape(case.output).to_vec();
    let weights = random_tensor(rng, &out_shape, &[]);

    let mut exec = Executor::new(&case.graph);
    for (id, t) in &case.leaves {
        exec.bind(*id, t).expect("leaf shapes match");
    }
    exec.forward().expect("forward");
    let grads = exec.backward(&[(case.output, weights.clone())]).expect("backward");

    let (mut diff, mut norm_a, mut norm_n) = (0.0f64, 0.0f64, 0.0f64);
    for &li in &case.checked {
        let (id, base) = &case.leaves[li];
        let analytic = grads.get(*id).expect("gradient reached leaf");
        let n = base.len();
        let picks: Vec<usize> = if n <= MAX_COORDS {
            (0..n).collect()
        } else {
            (0..MAX_COORDS).map(|_| rng.gen_range(0..n)).collect()
        };
        for j in picks {
            let mut plus = case.leaves.clone();
            plus[li].1.data_mut()[j] += STEP;
            let mut minus = case.leaves.clone();
            minus[li].1.data_mut()[j] -= STEP;
            let numeric =
                (weighted_output(case, &plus, &weights) - weighted_output(case, &minus, &weights)) / (2.0 * STEP);
            let a = analytic.data()[j];
            diff += (a - numeric).powi(2);
            norm_a += a * a;
            norm_n += numeric * numeric;
        }
    }
    let scale = norm_a.sqrt().max(norm_n.sqrt());
    if scale < 1e-12 {
        diff.sqrt()
    } else {
        diff.sqrt() / scale
    }
}

/// Runs `instances` random cases of `kind` and reports the worst relative error.
pub fn check_op(kind: OpKind, instances: usize, seed: u64) -> OpReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (kind as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let case = build_case(kind, &mut rng);
        assert_eq!(case.graph.kind(case.output), kind, "case builder produced the wrong op");
        worst = worst.max(relative_error(&case, &mut rng));
    }
    OpReport {
        kind,
        instances,
        worst_relative_error: worst,
    }
}

pub fn check_all(instances: usize, seed: u64) -> Vec<OpReport> {
    DIFFERENTIABLE_OPS.iter().map(|&k| check_op(k, instances, seed)).collect()
}

fn unary(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    away: &[f64],
    f: impl FnOnce(&mut Graph<f64>, NodeId) -> NodeId,
) -> Case {
    let mut g = Graph::new();
    let x = g.input("x", shape);
    let output = f(&mut g, x);
    Case {
        graph: g,
        leaves: vec![(x, random_tensor(rng, shape, away))],
        checked: vec![0],
        output,
    }
}

fn binary(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    f: impl FnOnce(&mut Graph<f64>, NodeId, NodeId) -> NodeId,
) -> Case {
    let mut g = Graph::new();
    let a = g.input("a", shape);
    let b = g.input("b", shape);
    let output = f(&mut g, a, b);
    Case {
        graph: g,
        leaves: vec![(a, random_tensor(rng, shape, &[])), (b, random_tensor(rng, shape, &[]))],
        checked: vec![0, 1],
        output,
    }
}

fn conv_case(r: &mut ChaCha8Rng) -> Case {
    let stride = r.gen_range(1..=2);
    let k = [1, 3][r.gen_range(0..2)];
    let pad = if k == 3 { 1 } else { 0 };
    let padding = [Padding::Zero, Padding::Reflect][r.gen_range(0..2)];
    let with_bias = r.gen_bool(0.5);
    let mut g = Graph::new();
    let x = g.input("x", &[3, 6, 6]);
    let w = g.parameter("w", &[4, 3, k, k]).expect("fresh name");
    let b = with_bias.then(|| g.parameter("b", &[4]).expect("fresh name"));
    let output = g.conv2d(x, w, b, stride, pad, padding).expect("valid conv");
    let mut leaves = vec![(x, random_tensor(r, &[3, 6, 6], &[])), (w, random_tensor(r, &[4, 3, k, k], &[]))];
    if let Some(b) = b {
        leaves.push((b, random_tensor(r, &[4], &[])));
    }
    let checked = (0..leaves.len()).collect();
    Case { graph: g, leaves, checked, output }
}

fn deconv_case(r: &mut ChaCha8Rng) -> Case {
    let with_bias = r.gen_bool(0.5);
    let mut g = Graph::new();
    let x = g.input("x", &[3, 4, 4]);
    let w = g.parameter("w", &[3, 2, 4, 4]).expect("fresh name");
    let b = with_bias.then(|| g.parameter("b", &[2]).expect("fresh name"));
    let output = g.transposed_conv2d(x, w, b, 2, 1).expect("valid deconv");
    let mut leaves = vec![(x, random_tensor(r, &[3, 4, 4], &[])), (w, random_tensor(r, &[3, 2, 4, 4], &[]))];
    if let Some(b) = b {
        leaves.push((b, random_tensor(r, &[2], &[])));
    }
    let checked = (0..leaves.len()).collect();
    Case { graph: g, leaves, checked, output }
}

fn row_mix_case(r: &mut ChaCha8Rng) -> Case {
    let mut g = Graph::new();
    let a = g.input("a", &[2, 6, 4]);
    let b = g.input("b", &[2, 6, 4]);
    let m = g.input("mask", &[6]);
    let output = g.row_mask_mix(a, b, m).expect("valid mix");
    let mask: Vec<f64> = (0..6).map(|_| if r.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
    Case {
        graph: g,
        leaves: vec![
            (a, random_tensor(r, &[2, 6, 4], &[])),
            (b, random_tensor(r, &[2, 6, 4], &[])),
            (m, Tensor::from_vec(&[6], mask).expect("length matches")),
        ],
        checked: vec![0, 1],
        output,
    }
}

/// Random instance of `kind`. Panics for leaf kinds, which have no gradient rule.
pub fn build_case(kind: OpKind, r: &mut ChaCha8Rng) -> Case {
    let ok = |res: crate::Result<NodeId>| res.expect("valid op");
    match kind {
        OpKind::Add => binary(r, &[2, 3, 4], |g, a, b| ok(g.add(a, b))),
        OpKind::Sub => binary(r, &[2, 3, 4], |g, a, b| ok(g.sub(a, b))),
        OpKind::Mul => binary(r, &[2, 3, 4], |g, a, b| ok(g.mul(a, b))),
        OpKind::Affine => unary(r, &[2, 4, 4], &[], |g, x| ok(g.affine(x, -0.7, 0.3))),
        OpKind::Conv2d => conv_case(r),
        OpKind::TransposedConv2d => deconv_case(r),
        OpKind::InstanceNorm => unary(r, &[3, 4, 5], &[], |g, x| ok(g.instance_norm(x, 1e-5))),
        OpKind::Relu => unary(r, &[2, 4, 4], &[0.0], |g, x| ok(g.relu(x))),
        OpKind::LeakyRelu => unary(r, &[2, 4, 4], &[0.0], |g, x| ok(g.leaky_relu(x, 0.2))),
        OpKind::Exp => unary(r, &[2, 4, 4], &[], |g, x| ok(g.exp(x))),
        OpKind::Clamp => unary(r, &[2, 4, 4], &[-0.5, 0.5], |g, x| ok(g.clamp(x, -0.5, 0.5))),
        OpKind::ConcatChannels => binary(r, &[2, 3, 3], |g, a, b| ok(g.concat_channels(&[a, b, a]))),
        OpKind::SliceChannels => unary(r, &[4, 3, 3], &[], |g, x| ok(g.slice_channels(x, 1, 3))),
        OpKind::GlobalAvgPool => unary(r, &[3, 4, 4], &[], |g, x| ok(g.global_avg_pool(x))),
        OpKind::TileSpatial => unary(r, &[3, 1, 1], &[], |g, x| ok(g.tile_spatial(x, 4, 5))),
        OpKind::ComplexDft2 => unary(r, &[2, 4, 4], &[], |g, x| ok(g.complex_dft2(x))),
        OpKind::ComplexIdft2 => unary(r, &[2, 8, 8], &[], |g, x| ok(g.complex_idft2(x))),
        OpKind::ComplexAbs => unary(r, &[2, 4, 4], &[0.0], |g, x| ok(g.complex_abs(x, 1e-12))),
        OpKind::RowMaskMix => row_mix_case(r),
        OpKind::ReduceSum => unary(r, &[2, 3, 3], &[], |g, x| ok(g.reduce_sum(x))),
        OpKind::ReduceMean => unary(r, &[2, 3, 3], &[], |g, x| ok(g.reduce_mean(x))),
        OpKind::Input | OpKind::Parameter | OpKind::Constant => panic!("{kind:?} has no gradient rule"),
    }
}

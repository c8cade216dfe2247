use akspace_autodiff::gradcheck::{check_op, relative_error, Case, DIFFERENTIABLE_OPS};
use akspace_autodiff::{Graph, OpKind, Padding};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const INSTANCES: usize = 20;
const TOL: f64 = 1e-4;

fn assert_op(kind: OpKind) {
    let r = check_op(kind, INSTANCES, 0xD1FF);
    assert!(r.worst_relative_error < TOL, "{kind:?}: worst relative error {:e}", r.worst_relative_error);
}

#[test]
fn add_sub_mul() {
    for k in [OpKind::Add, OpKind::Sub, OpKind::Mul] {
        assert_op(k);
    }
}

#[test]
fn pointwise() {
    for k in [OpKind::Affine, OpKind::Relu, OpKind::LeakyRelu, OpKind::Exp, OpKind::Clamp] {
        assert_op(k);
    }
}

#[test]
fn convolutions() {
    assert_op(OpKind::Conv2d);
    assert_op(OpKind::TransposedConv2d);
}

#[test]
fn instance_norm() {
    assert_op(OpKind::InstanceNorm);
}

#[test]
fn channel_plumbing() {
    for k in [OpKind::ConcatChannels, OpKind::SliceChannels, OpKind::GlobalAvgPool, OpKind::TileSpatial] {
        assert_op(k);
    }
}

#[test]
fn fourier() {
    for k in [OpKind::ComplexDft2, OpKind::ComplexIdft2, OpKind::ComplexAbs, OpKind::RowMaskMix] {
        assert_op(k);
    }
}

#[test]
fn reductions() {
    assert_op(OpKind::ReduceSum);
    assert_op(OpKind::ReduceMean);
}

#[test]
fn op_list_is_complete() {
    let leaf = [OpKind::Input, OpKind::Parameter, OpKind::Constant];
    // every variant is either a leaf or has a case builder
    assert_eq!(DIFFERENTIABLE_OPS.len() + leaf.len(), OpKind::ReduceMean as usize + 1);
}

#[test]
fn composite_chain() {
    // conv -> IN -> leaky relu -> dft -> abs -> mean, gradient flow through a stack
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..INSTANCES {
        let mut g = Graph::new();
        let x = g.input("x", &[2, 8, 8]);
        let w = g.parameter("w", &[2, 2, 3, 3]).unwrap();
        let c = g.conv2d(x, w, None, 1, 1, Padding::Reflect).unwrap();
        let n = g.instance_norm(c, 1e-5).unwrap();
        let a = g.leaky_relu(n, 0.2).unwrap();
        let f = g.complex_dft2(a).unwrap();
        let m = g.complex_abs(f, 1e-12).unwrap();
        let output = g.reduce_mean(m).unwrap();
        let case = Case {
            graph: g,
            leaves: vec![
                (x, akspace_autodiff::gradcheck::random_tensor(&mut rng, &[2, 8, 8], &[])),
                (w, akspace_autodiff::gradcheck::random_tensor(&mut rng, &[2, 2, 3, 3], &[])),
            ],
            checked: vec![0, 1],
            output,
        };
        let e = relative_error(&case, &mut rng);
        assert!(e < TOL, "composite chain error {e:e}");
    }
}

use akspace_autodiff::{ParamSet, Tensor};
use akspace_core::data::{generate_phantoms, mask_at_kma, rng_from_seed, SimRng};
use akspace_core::kspace::{ComplexImage, Domain, RealGrid};
use akspace_core::metrics::gaussian_nll;
use akspace_core::models::{
    init_params, tensor_image, EvaluatorConfig, ModelConfig, ReconstructionResult, ReconstructorConfig,
};
use akspace_core::training::{
    diverged, evaluator_loss, learning_rate, reconstructor_loss, train, EvaluatorLossMode, GammaSetting, Nets,
    Sample, TrainConfig,
};
use akspace_core::CoreError;
use rand::Rng;

const N: usize = 16;
const H: f64 = 1e-6;

fn small() -> ModelConfig {
    ModelConfig {
        recon: ReconstructorConfig { base_channels: 8, image_size: N, ..Default::default() },
        eval: EvaluatorConfig { image_size: N, base_channels: 8, ..Default::default() },
    }
}

fn noisy_heads(params: &mut ParamSet<f64>, rng: &mut SimRng) {
    let names: Vec<String> = params.names().iter().filter(|n| n.contains(".out.")).cloned().collect();
    for name in names {
        let t = params.get_mut(&name).unwrap();
        for v in t.data_mut() {
            *v = rng.gen_range(-0.1..0.1);
        }
    }
}

fn setup(seed: u64) -> (Nets<f64>, Sample<f64>, ParamSet<f64>, ParamSet<f64>) {
    let nets = Nets::<f64>::build(small()).unwrap();
    let mut rng = rng_from_seed(seed);
    let mut rp = init_params::<f64>(&nets.recon.graph.parameter_specs(), &mut rng).unwrap();
    let ep = init_params::<f64>(&nets.eval.graph.parameter_specs(), &mut rng).unwrap();
    noisy_heads(&mut rp, &mut rng);
    let ds = generate_phantoms(seed, 1, N).unwrap();
    let mask = mask_at_kma(&mut rng, N, 0.3, 2).unwrap();
    let s = Sample::new(ComplexImage::from_real(&ds.items[0].image), mask).unwrap();
    (nets, s, rp, ep)
}

/// Picks a few coordinates from parameters spread through the network.
fn probes(params: &ParamSet<f64>, rng: &mut SimRng, per_param: usize) -> Vec<(usize, usize)> {
    let count = params.len();
    let picks = [0, count / 4, count / 2, 3 * count / 4, count - 2, count - 1];
    let mut out = Vec::new();
    for &pi in &picks {
        let len = params.tensors()[pi].len();
        for _ in 0..per_param {
            out.push((pi, rng.gen_range(0..len)));
        }
    }
    out
}

fn fd_error(
    params: &ParamSet<f64>,
    analytic: &[Tensor<f64>],
    coords: &[(usize, usize)],
    loss: impl Fn(&ParamSet<f64>) -> f64,
) -> f64 {
    let (mut diff, mut scale) = (0.0f64, 0.0f64);
    for &(pi, ci) in coords {
        let mut plus = params.clone();
        plus.tensors_mut()[pi].data_mut()[ci] += H;
        let mut minus = params.clone();
        minus.tensors_mut()[pi].data_mut()[ci] -= H;
        let numeric = (loss(&plus) - loss(&minus)) / (2.0 * H);
        let a = analytic[pi].data()[ci];
        diff += (a - numeric).powi(2);
        scale += a.powi(2).max(numeric.powi(2));
    }
    diff.sqrt() / scale.sqrt().max(1e-12)
}

#[test]
fn reconstructor_gradient_matches_finite_differences() {
    for seed in 0..2 {
        let (nets, s, rp, ep) = setup(100 + seed);
        let beta = 0.3;
        let total = |p: &ParamSet<f64>| {
            let ex = nets.recon_exec(&s, p).unwrap();
            nets.reconstructor_gradient(&ex, &s, &ep, beta).unwrap().0
        };
        let ex = nets.recon_exec(&s, &rp).unwrap();
        let (_, _, grads) = nets.reconstructor_gradient(&ex, &s, &ep, beta).unwrap();
        let mut rng = rng_from_seed(seed);
        let coords = probes(&rp, &mut rng, 4);
        let err = fd_error(&rp, &grads, &coords, total);
        assert!(err < 1e-3, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn evaluator_gradient_matches_finite_differences() {
    for seed in 0..2 {
        let (nets, s, rp, ep) = setup(200 + seed);
        let ex = nets.recon_exec(&s, &rp).unwrap();
        let r = ex.value(*nets.recon.outputs.last().unwrap()).unwrap().clone();
        let mut rng = rng_from_seed(seed);
        let targets: Vec<f64> = (0..N).map(|_| rng.gen_range(0.0..1.0)).collect();
        let loss = |p: &ParamSet<f64>| {
            let ex = nets.eval_exec(&r, &s, p).unwrap();
            evaluator_loss(&nets.scores(&ex).unwrap(), &targets).unwrap()
        };
        let (l0, grads) = nets.evaluator_gradient(&r, &s, &ep, &targets).unwrap();
        assert!((l0 - loss(&ep)).abs() < 1e-12);
        let coords = probes(&ep, &mut rng, 4);
        let err = fd_error(&ep, &grads, &coords, loss);
        assert!(err < 1e-3, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn total_loss_is_deep_supervision_plus_adversarial_term() {
    let (nets, s, rp, ep) = setup(300);
    let beta = 0.25;
    let ex = nets.recon_exec(&s, &rp).unwrap();
    let (total, nll, _) = nets.reconstructor_gradient(&ex, &s, &ep, beta).unwrap();

    // rebuild every term outside the graph
    let mut per_cascade = Vec::new();
    for (&r, &lv) in nets.recon.outputs.iter().zip(&nets.recon.log_vars) {
        let img = tensor_image(ex.value(r).unwrap(), Domain::Image).unwrap();
        let u = RealGrid::new(N, N, ex.value(lv).unwrap().data().iter().map(|v| v.exp()).collect()).unwrap();
        per_cascade.push((img, u));
    }
    let k = per_cascade.len() as f64;
    let mean_nll = per_cascade.iter().map(|(r, u)| gaussian_nll(r, &s.x, u).unwrap()).sum::<f64>() / k;
    assert!((nll - mean_nll).abs() < 1e-9 * mean_nll.abs().max(1.0), "{nll} vs {mean_nll}");

    let r_final = ex.value(*nets.recon.outputs.last().unwrap()).unwrap().clone();
    let scores = nets.scores(&nets.eval_exec(&r_final, &s, &ep).unwrap()).unwrap();
    let result = ReconstructionResult { per_cascade };
    let expect = reconstructor_loss(&result, &s.x, &scores, beta).unwrap();
    assert!((total - expect).abs() < 1e-9 * expect.abs().max(1.0), "{total} vs {expect}");
    let adv: f64 = scores.iter().map(|e| (e - 1.0).powi(2)).sum();
    assert!((total - mean_nll - beta * adv).abs() < 1e-9 * total.abs().max(1.0));
}

#[test]
fn learning_rate_schedule() {
    let lr0 = 6e-4;
    for e in 1..=10 {
        assert_eq!(learning_rate(lr0, e, 10, 10), lr0);
    }
    for e in 11..=20 {
        let expect = lr0 * (21 - e) as f64 / 10.0;
        assert!((learning_rate(lr0, e, 10, 10) - expect).abs() < 1e-15, "epoch {e}");
    }
    assert_eq!(learning_rate(lr0, 21, 10, 10), 0.0);
    assert_eq!(learning_rate(lr0, 3, 2, 0), 0.0);
}

#[test]
fn divergence_rule() {
    assert!(!diverged(&[]));
    assert!(diverged(&[1.0, f64::NAN]));
    assert!(diverged(&[f64::INFINITY]));
    assert!(!diverged(&[1.0, 2.0, 3.0, 5.0]));
    assert!(diverged(&[1.0, 2.0, 3.0, 10.5]));
    assert!(!diverged(&[-2.0, -1.0, 0.0, 9.0]));
}

#[test]
fn config_keys_roundtrip() {
    let mut cfg = TrainConfig::default();
    for line in cfg.to_text().lines() {
        let (k, v) = line.split_once('=').unwrap();
        cfg.set(k, v).unwrap();
    }
    assert_eq!(cfg, TrainConfig::default());
    cfg.set("gamma", "2.5").unwrap();
    assert_eq!(cfg.gamma, GammaSetting::Fixed(2.5));
    cfg.set("evaluator_loss", "binary").unwrap();
    assert_eq!(cfg.evaluator_loss, EvaluatorLossMode::Binary);
    assert!(matches!(cfg.set("nope", "1"), Err(CoreError::Invalid(_))));
    assert!(matches!(cfg.set("lr", "fast"), Err(CoreError::Invalid(_))));
    cfg.set("cascades", "0").unwrap();
    assert!(cfg.validate().is_err());
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        base_channels: 4,
        evaluator_base_channels: 4,
        cascades: 2,
        epochs_constant: 1,
        epochs_decay: 1,
        batch_size: 4,
        seed: 9,
        ..TrainConfig::default()
    }
}

#[test]
fn tiny_training_run_is_deterministic() {
    let train_set = generate_phantoms(1, 8, N).unwrap();
    let val_set = generate_phantoms(2, 3, N).unwrap();
    let cfg = tiny_config();
    let mut seen = Vec::new();
    let a = train(&train_set, &val_set, &cfg, |row| seen.push(row.epoch)).unwrap();
    let b = train(&train_set, &val_set, &cfg, |_| {}).unwrap();
    assert_eq!(seen, vec![1, 2]);
    assert_eq!(a.log, b.log);
    assert_eq!(a.gamma, b.gamma);
    assert_eq!(a.final_model.all_params().unwrap(), b.final_model.all_params().unwrap());
    assert!(a.log.iter().all(|r| r.val_nll.is_finite() && r.val_mse.is_finite()));
    assert!((1..=2).contains(&a.best_epoch));

    let dir = tempfile::tempdir().unwrap();
    akspace_core::training::write_outcome(dir.path(), &a).unwrap();
    for f in ["log.csv", "final.aksp", "best.aksp", "gamma.txt"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn training_rejects_bad_inputs() {
    let ds = generate_phantoms(1, 4, N).unwrap();
    let empty = akspace_core::data::Dataset::new(vec![], akspace_core::data::Split::Train).unwrap();
    assert!(train(&empty, &ds, &tiny_config(), |_| {}).is_err());
    let other = generate_phantoms(1, 2, 32).unwrap();
    assert!(matches!(train(&ds, &other, &tiny_config(), |_| {}), Err(CoreError::SizeMismatch(_))));
    let cfg = TrainConfig { beta: -1.0, ..tiny_config() };
    assert!(train(&ds, &ds, &cfg, |_| {}).is_err());
}

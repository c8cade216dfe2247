//! Joint alternating training of the reconstructor and evaluator.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use akspace_autodiff::{clip_global_norm, Adam, AdamConfig, Executor, ParamSet, Real, Tensor};
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::data::{mask_at_kma, rng_from_seed, sample_training_mask, Dataset, MaskSamplerConfig, SimRng};
use crate::error::{CoreError, Result};
use crate::kspace::{apply_mask, row_error_energy, simulate_kspace, zero_fill, ComplexImage, SamplingMask};
use crate::metrics::{gaussian_nll, median_of, mse, ssim, targets_from_energy};
use crate::models::{
    image_tensor, init_params, log_unobserved_tensor, mask_column_tensor, mask_tensor, unobserved_fraction, EvaluatorConfig, EvaluatorGraph, Model,
    ModelConfig, ReconstructionResult, ReconstructorConfig, ReconstructorGraph,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvaluatorLossMode {
    /// Regress towards `exp(-γ ||ΔM_i||²)`.
    Kernel,
    /// Regress towards 1 for observed rows and 0 for unobserved rows.
    Binary,
}

impl EvaluatorLossMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "kernel" => Ok(Self::Kernel),
            "binary" => Ok(Self::Binary),
            other => Err(CoreError::Invalid(format!("unknown evaluator loss mode `{other}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Kernel => "kernel",
            Self::Binary => "binary",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GammaSetting {
    Fixed(f64),
    /// `ln 2 / median` of unobserved-row spectral errors of zero-filled training images at
    /// kMA 0.25, which puts the median unobserved target at 0.5.
    Auto,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub beta: f64,
    pub gamma: GammaSetting,
    pub cascades: usize,
    pub base_channels: usize,
    pub evaluator_base_channels: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub epochs_constant: usize,
    pub epochs_decay: usize,
    pub batch_size: usize,
    pub evaluator_loss: EvaluatorLossMode,
    pub seed: u64,
    pub clip_norm: f64,
    pub val_fraction: f64,
    pub val_kma: f64,
    pub fixed_low_freq_rows: Option<usize>,
    pub min_measurements: Option<usize>,
    pub max_measurements: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            gamma: GammaSetting::Auto,
            cascades: 3,
            base_channels: 32,
            evaluator_base_channels: 32,
            lr: 6e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            epochs_constant: 10,
            epochs_decay: 10,
            batch_size: 8,
            evaluator_loss: EvaluatorLossMode::Kernel,
            seed: 0,
            clip_norm: 10.0,
            val_fraction: 0.125,
            val_kma: 0.25,
            fixed_low_freq_rows: None,
            min_measurements: None,
            max_measurements: None,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| CoreError::Invalid(format!("bad value `{value}` for `{key}`")))
}

impl TrainConfig {
    /// Full-scale hyperparameters (50 + 50 epochs, 128 base channels, γ = 100).
    pub fn full_scale() -> Self {
        Self {
            gamma: GammaSetting::Fixed(100.0),
            base_channels: 128,
            evaluator_base_channels: 128,
            epochs_constant: 50,
            epochs_decay: 50,
            batch_size: 48,
            ..Self::default()
        }
    }

    pub const KEYS: &'static [&'static str] = &[
        "beta",
        "gamma",
        "cascades",
        "base_channels",
        "evaluator_base_channels",
        "lr",
        "adam_beta1",
        "adam_beta2",
        "epochs_constant",
        "epochs_decay",
        "batch_size",
        "evaluator_loss",
        "seed",
        "clip_norm",
        "val_fraction",
        "val_kma",
        "fixed_low_freq_rows",
        "min_measurements",
        "max_measurements",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "beta" => self.beta = parse_num(key, value)?,
            "gamma" => {
                self.gamma = if value == "auto" {
                    GammaSetting::Auto
                } else {
                    GammaSetting::Fixed(parse_num(key, value)?)
                }
            }
            "cascades" => self.cascades = parse_num(key, value)?,
            "base_channels" => self.base_channels = parse_num(key, value)?,
            "evaluator_base_channels" => self.evaluator_base_channels = parse_num(key, value)?,
            "lr" => self.lr = parse_num(key, value)?,
            "adam_beta1" => self.adam_beta1 = parse_num(key, value)?,
            "adam_beta2" => self.adam_beta2 = parse_num(key, value)?,
            "epochs_constant" => self.epochs_constant = parse_num(key, value)?,
            "epochs_decay" => self.epochs_decay = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "evaluator_loss" => self.evaluator_loss = EvaluatorLossMode::parse(value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "clip_norm" => self.clip_norm = parse_num(key, value)?,
            "val_fraction" => self.val_fraction = parse_num(key, value)?,
            "val_kma" => self.val_kma = parse_num(key, value)?,
            "fixed_low_freq_rows" => self.fixed_low_freq_rows = Some(parse_num(key, value)?),
            "min_measurements" => self.min_measurements = Some(parse_num(key, value)?),
            "max_measurements" => self.max_measurements = Some(parse_num(key, value)?),
            other => return Err(CoreError::Invalid(format!("unknown training key `{other}`"))),
        }
        Ok(())
    }

    /// Applies the training keys found in `pairs`; other keys are left to other consumers.
    pub fn apply(&mut self, pairs: &BTreeMap<String, String>) -> Result<()> {
        for (k, v) in pairs {
            if Self::KEYS.contains(&k.as_str()) {
                self.set(k, v)?;
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoreError::Invalid(m.to_string()));
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta must be non-negative");
        }
        if let GammaSetting::Fixed(g) = self.gamma {
            if !(g > 0.0 && g.is_finite()) {
                return bad("gamma must be positive");
            }
        }
        if self.cascades == 0 {
            return bad("cascades must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be non-negative");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(self.val_kma > 0.0 && self.val_kma <= 1.0) {
            return bad("val_kma must lie in (0, 1]");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs_constant + self.epochs_decay
    }

    pub fn model_config(&self, image_size: usize) -> ModelConfig {
        ModelConfig {
            recon: ReconstructorConfig {
                cascades: self.cascades,
                base_channels: self.base_channels,
                image_size,
                ..Default::default()
            },
            eval: EvaluatorConfig {
                image_size,
                base_channels: self.evaluator_base_channels,
                ..Default::default()
            },
        }
    }

    pub fn mask_sampler(&self, image_size: usize) -> MaskSamplerConfig {
        let d = MaskSamplerConfig::for_size(image_size);
        MaskSamplerConfig {
            n_rows: image_size,
            fixed_low_freq_rows: self.fixed_low_freq_rows.unwrap_or(d.fixed_low_freq_rows),
            min_measurements: self.min_measurements.unwrap_or(d.min_measurements),
            max_measurements: self.max_measurements.unwrap_or(d.max_measurements),
        }
    }

    /// Flat `key=value` echo, one line per field.
    pub fn to_text(&self) -> String {
        let opt = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_else(|| "default".into());
        let mut s = String::new();
        let gamma = match self.gamma {
            GammaSetting::Auto => "auto".to_string(),
            GammaSetting::Fixed(g) => g.to_string(),
        };
        let lines = [
            ("beta", self.beta.to_string()),
            ("gamma", gamma),
            ("cascades", self.cascades.to_string()),
            ("base_channels", self.base_channels.to_string()),
            ("evaluator_base_channels", self.evaluator_base_channels.to_string()),
            ("lr", self.lr.to_string()),
            ("adam_beta1", self.adam_beta1.to_string()),
            ("adam_beta2", self.adam_beta2.to_string()),
            ("epochs_constant", self.epochs_constant.to_string()),
            ("epochs_decay", self.epochs_decay.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("evaluator_loss", self.evaluator_loss.as_str().to_string()),
            ("seed", self.seed.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("val_fraction", self.val_fraction.to_string()),
            ("val_kma", self.val_kma.to_string()),
            ("fixed_low_freq_rows", opt(self.fixed_low_freq_rows)),
            ("min_measurements", opt(self.min_measurements)),
            ("max_measurements", opt(self.max_measurements)),
        ];
        for (k, v) in lines {
            if v != "default" {
                let _ = writeln!(s, "{k}={v}");
            }
        }
        s
    }
}

/// Learning rate for 1-indexed `epoch`: constant for `constant` epochs, then decreasing
/// linearly by `lr0 / decay` per epoch, reaching 0 after `constant + decay` epochs.
pub fn learning_rate(lr0: f64, epoch: usize, constant: usize, decay: usize) -> f64 {
    if decay == 0 {
        return if epoch <= constant { lr0 } else { 0.0 };
    }
    let remaining = (constant + decay + 1) as f64 - epoch as f64;
    lr0 * (remaining / decay as f64).clamp(0.0, 1.0)
}

/// Evaluator targets for one reconstruction.
pub fn evaluator_targets(
    r: &ComplexImage,
    x: &ComplexImage,
    mask: &SamplingMask,
    mode: EvaluatorLossMode,
    gamma: f64,
) -> Result<Vec<f64>> {
    match mode {
        EvaluatorLossMode::Kernel => targets_from_energy(&row_error_energy(r, x)?, gamma),
        EvaluatorLossMode::Binary => Ok(mask.as_f64()),
    }
}

/// `Σ_i (e_i - t_i)²`.
pub fn evaluator_loss(scores: &[f64], targets: &[f64]) -> Result<f64> {
    if scores.len() != targets.len() {
        return Err(CoreError::SizeMismatch(format!(
            "{} scores for {} targets",
            scores.len(),
            targets.len()
        )));
    }
    Ok(scores.iter().zip(targets).map(|(e, t)| (e - t).powi(2)).sum())
}

/// `(1/K) Σ_k NLL(r^k, x, u^k) + β Σ_i (e_i - 1)²` for scores `e` of the final cascade.
pub fn reconstructor_loss(
    result: &ReconstructionResult,
    x: &ComplexImage,
    final_scores: &[f64],
    beta: f64,
) -> Result<f64> {
    let k = result.per_cascade.len() as f64;
    let mut nll = 0.0;
    for (r, u) in &result.per_cascade {
        nll += gaussian_nll(r, x, u)?;
    }
    let adv: f64 = final_scores.iter().map(|e| (e - 1.0).powi(2)).sum();
    let total = nll / k + beta * adv;
    if !total.is_finite() {
        return Err(CoreError::Diverged(format!("reconstructor loss is {total}")));
    }
    Ok(total)
}

/// One training example in network form.
pub struct Sample<T: Real> {
    pub x: ComplexImage,
    pub zero_filled: ComplexImage,
    pub mask: SamplingMask,
    x_t: Tensor<T>,
    zero_filled_t: Tensor<T>,
    mask_t: Tensor<T>,
    mask_column_t: Tensor<T>,
    log_unobserved_t: Tensor<T>,
}

impl<T: Real> Sample<T> {
    pub fn new(x: ComplexImage, mask: SamplingMask) -> Result<Self> {
        let zero_filled = zero_fill(&apply_mask(&crate::kspace::dft2(&x)?, &mask)?)?;
        Ok(Self {
            x_t: image_tensor(&x),
            zero_filled_t: image_tensor(&zero_filled),
            mask_t: mask_tensor(&mask),
            mask_column_t: mask_column_tensor(&mask),
            log_unobserved_t: log_unobserved_tensor(&mask),
            x,
            zero_filled,
            mask,
        })
    }
}

/// Reconstructor and evaluator training graphs for one precision.
pub struct Nets<T: Real> {
    pub recon: ReconstructorGraph<T>,
    pub eval: EvaluatorGraph<T>,
}

impl<T: Real> Nets<T> {
    pub fn build(cfg: ModelConfig) -> Result<Self> {
        Ok(Self {
            recon: ReconstructorGraph::build(cfg.recon, true)?,
            eval: EvaluatorGraph::build(cfg.eval)?,
        })
    }

    /// Forward pass of the training graph for one sample.
    pub fn recon_exec<'a>(&'a self, s: &'a Sample<T>, params: &'a ParamSet<T>) -> Result<Executor<'a, T>> {
        let net = &self.recon;
        let mut ex = Executor::new(&net.graph);
        ex.bind(net.input, &s.zero_filled_t)?;
        ex.bind(net.mask, &s.mask_t)?;
        ex.bind(net.log_unobserved, &s.log_unobserved_t)?;
        ex.bind(net.target.expect("training graph"), &s.x_t)?;
        ex.bind_params(params)?;
        ex.forward()?;
        Ok(ex)
    }

    /// Forward pass of the evaluator on a reconstruction tensor.
    pub fn eval_exec<'a>(&'a self, r: &'a Tensor<T>, s: &'a Sample<T>, params: &'a ParamSet<T>) -> Result<Executor<'a, T>> {
        let net = &self.eval;
        let mut ex = Executor::new(&net.graph);
        ex.bind(net.input, r)?;
        ex.bind(net.mask_column, &s.mask_column_t)?;
        ex.bind_params(params)?;
        ex.forward()?;
        Ok(ex)
    }

    pub fn scores(&self, ex: &Executor<'_, T>) -> Result<Vec<f64>> {
        Ok(ex.value(self.eval.scores)?.data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect())
    }

    /// Evaluator loss and parameter gradients on a detached reconstruction `r`.
    pub fn evaluator_gradient(
        &self,
        r: &Tensor<T>,
        s: &Sample<T>,
        params: &ParamSet<T>,
        targets: &[f64],
    ) -> Result<(f64, Vec<Tensor<T>>)> {
        let ex = self.eval_exec(r, s, params)?;
        let e = self.scores(&ex)?;
        let loss = evaluator_loss(&e, targets)?;
        let n = e.len();
        let seed = Tensor::from_vec(&[n, 1, 1], e.iter().zip(targets).map(|(e, t)| T::of(2.0 * (e - t))).collect())?;
        let grads = ex.backward(&[(self.eval.scores, seed)])?;
        Ok((loss, grads.parameter_grads(&self.eval.graph)))
    }

    /// Total reconstructor loss `(1/K) Σ NLL_k + β Σ (e(r^K) - 1)²` and its gradient with
    /// respect to the reconstructor parameters; the evaluator is held fixed.
    pub fn reconstructor_gradient(
        &self,
        recon_ex: &Executor<'_, T>,
        s: &Sample<T>,
        eval_params: &ParamSet<T>,
        beta: f64,
    ) -> Result<(f64, f64, Vec<Tensor<T>>)> {
        let net = &self.recon;
        let loss_node = net.loss.expect("training graph");
        let nll = recon_ex.value(loss_node)?.data()[0].to_f64().unwrap_or(f64::NAN);
        let r_final = *net.outputs.last().expect("at least one cascade");
        let mut seeds = vec![(loss_node, Tensor::scalar(T::one()))];
        let mut adv = 0.0;
        if beta > 0.0 {
            let r = recon_ex.value(r_final)?;
            let ex = self.eval_exec(r, s, eval_params)?;
            let e = self.scores(&ex)?;
            adv = e.iter().map(|v| (v - 1.0).powi(2)).sum::<f64>();
            let n = e.len();
            let seed = Tensor::from_vec(&[n, 1, 1], e.iter().map(|v| T::of(2.0 * beta * (v - 1.0))).collect())?;
            let g = ex.backward(&[(self.eval.scores, seed)])?;
            let gr = g
                .get(self.eval.input)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(r.shape()));
            seeds.push((r_final, gr));
        }
        let total = nll + beta * adv;
        if !total.is_finite() {
            return Err(CoreError::Diverged(format!("reconstructor loss is {total}")));
        }
        let grads = recon_ex.backward(&seeds)?;
        Ok((total, nll, grads.parameter_grads(&net.graph)))
    }
}

/// Target sharpness from zero-filled reconstructions of `dataset` at kMA 0.25.
pub fn calibrate_gamma(dataset: &Dataset, fixed_pairs: usize, seed: u64) -> Result<f64> {
    let mut rng = rng_from_seed(seed);
    let mut energies = Vec::new();
    for it in dataset.items.iter().take(64) {
        let n = it.image.size();
        let mask = mask_at_kma(&mut rng, n, 0.25, fixed_pairs)?;
        let y = simulate_kspace(&it.image);
        let zf = zero_fill(&apply_mask(&y, &mask)?)?;
        let e = row_error_energy(&zf, &ComplexImage::from_real(&it.image))?;
        energies.extend((0..n).filter(|&r| !mask.is_observed(r)).map(|r| e[r]));
    }
    let median = median_of(&energies)?;
    if !(median > 0.0) {
        return Err(CoreError::MathDomain("zero spectral error; cannot calibrate gamma".into()));
    }
    Ok(std::f64::consts::LN_2 / median)
}

/// Log of the mean per-pixel zero-fill error at kMA 0.25 per unit of unobserved fraction,
/// used to start the variance heads near the typical residual instead of at u = 1.
pub fn initial_log_variance(dataset: &Dataset, fixed_pairs: usize, seed: u64) -> Result<f64> {
    let mut rng = rng_from_seed(seed);
    let (mut sum, mut count) = (0.0, 0.0);
    for it in dataset.items.iter().take(64) {
        let n = it.image.size();
        let mask = mask_at_kma(&mut rng, n, 0.25, fixed_pairs)?;
        let zf = zero_fill(&apply_mask(&simulate_kspace(&it.image), &mask)?)?;
        sum += zf.sub(&ComplexImage::from_real(&it.image))?.norm_sqr();
        count += (n * n) as f64 * unobserved_fraction(&mask);
    }
    let mean = sum / count;
    if !(mean > 0.0) {
        return Err(CoreError::MathDomain("zero reconstruction error; cannot initialize variance".into()));
    }
    Ok(mean.ln())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_nll: f64,
    pub val_mse: f64,
    pub val_ssim: f64,
    pub val_nll: f64,
    pub val_eval_loss: f64,
}

pub const LOG_HEADER: &str = "epoch,lr,train_nll,val_mse,val_ssim,val_nll,val_eval_loss";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch, self.lr, self.train_nll, self.val_mse, self.val_ssim, self.val_nll, self.val_eval_loss
        )
    }
}

/// Validation metrics of a model on fixed masks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValMetrics {
    pub mse: f64,
    pub zero_fill_mse: f64,
    pub ssim: f64,
    pub nll: f64,
    pub eval_loss: f64,
}

pub fn validate_model(
    model: &Model,
    val: &[(ComplexImage, SamplingMask)],
    mode: EvaluatorLossMode,
    gamma: f64,
) -> Result<ValMetrics> {
    let per: Vec<[f64; 5]> = val
        .par_iter()
        .map(|(x, mask)| -> Result<[f64; 5]> {
            let zf = zero_fill(&apply_mask(&crate::kspace::dft2(x)?, mask)?)?;
            let res = model.reconstruct(&zf, mask)?;
            let k = res.per_cascade.len() as f64;
            let mut nll = 0.0;
            for (r, u) in &res.per_cascade {
                nll += gaussian_nll(r, x, u)? / k;
            }
            let scores = model.evaluate(res.r(), mask)?;
            let targets = evaluator_targets(res.r(), x, mask, mode, gamma)?;
            let s = if x.size() >= crate::metrics::SSIM_WINDOW {
                ssim(&res.r().real_part(), &x.real_part())?
            } else {
                f64::NAN
            };
            Ok([mse(res.r(), x)?, mse(&zf, x)?, s, nll, evaluator_loss(&scores.values, &targets)?])
        })
        .collect::<Result<_>>()?;
    let m = |i: usize| per.iter().map(|p| p[i]).sum::<f64>() / per.len() as f64;
    Ok(ValMetrics {
        mse: m(0),
        zero_fill_mse: m(1),
        ssim: m(2),
        nll: m(3),
        eval_loss: m(4),
    })
}

/// Fixed validation masks at `kma`, drawn from `seed`.
pub fn validation_set(val: &Dataset, kma: f64, fixed_pairs: usize, seed: u64) -> Result<Vec<(ComplexImage, SamplingMask)>> {
    let mut rng = rng_from_seed(seed);
    val.items
        .iter()
        .map(|it| {
            let mask = mask_at_kma(&mut rng, it.image.size(), kma, fixed_pairs)?;
            Ok((ComplexImage::from_real(&it.image), mask))
        })
        .collect()
}

pub struct TrainOutcome {
    pub final_model: Model,
    pub best_model: Model,
    pub best_epoch: usize,
    pub gamma: f64,
    pub log: Vec<EpochLog>,
}

fn mean_grads(per_sample: Vec<Vec<Tensor<f32>>>) -> Vec<Tensor<f32>> {
    let count = per_sample.len() as f32;
    let mut iter = per_sample.into_iter();
    let mut acc = iter.next().expect("non-empty batch");
    for g in iter {
        for (a, b) in acc.iter_mut().zip(&g) {
            a.add_assign(b);
        }
    }
    for a in &mut acc {
        a.scale_assign(1.0 / count);
    }
    acc
}

/// True when validation NLL is non-finite or has grown tenfold over three epochs.
pub fn diverged(val_nll: &[f64]) -> bool {
    let Some(&last) = val_nll.last() else {
        return false;
    };
    if !last.is_finite() {
        return true;
    }
    val_nll.len() > 3 && last > 10.0 * val_nll[val_nll.len() - 4].abs().max(1.0)
}

/// Trains both networks; `on_epoch` sees every log row as it is produced.
pub fn train(
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(CoreError::Invalid("training and validation sets must be non-empty".into()));
    }
    let n = train_set.image_size().expect("non-empty");
    if val_set.image_size() != Some(n) {
        return Err(CoreError::SizeMismatch("train and validation image sizes differ".into()));
    }
    let model_cfg = cfg.model_config(n);
    let sampler = cfg.mask_sampler(n);
    sampler.validate()?;
    let gamma = match cfg.gamma {
        GammaSetting::Fixed(g) => g,
        GammaSetting::Auto => calibrate_gamma(train_set, sampler.fixed_pairs(), cfg.seed ^ 0x6a09_e667)?,
    };
    log::info!("gamma = {gamma}");

    let nets = Nets::<f32>::build(model_cfg)?;
    let mut rng: SimRng = rng_from_seed(cfg.seed);
    let mut recon_params = init_params::<f32>(&nets.recon.graph.parameter_specs(), &mut rng)?;
    let mut eval_params = init_params::<f32>(&nets.eval.graph.parameter_specs(), &mut rng)?;
    let log_var0 = initial_log_variance(train_set, sampler.fixed_pairs(), cfg.seed ^ 0x3c6e_f372)?;
    for k in 0..model_cfg.recon.cascades {
        if let Some(b) = recon_params.get_mut(&format!("recon.c{k}.out.b")) {
            b.data_mut()[2] = log_var0 as f32;
        }
    }
    let adam_cfg = AdamConfig {
        beta1: cfg.adam_beta1,
        beta2: cfg.adam_beta2,
        ..Default::default()
    };
    let mut recon_opt = Adam::new(adam_cfg, &recon_params);
    let mut eval_opt = Adam::new(adam_cfg, &eval_params);
    let val_pairs = validation_set(val_set, cfg.val_kma, sampler.fixed_pairs(), cfg.seed ^ 0xbb67_ae85)?;

    let mut log_rows = Vec::new();
    let mut val_nlls = Vec::new();
    let mut best: Option<(f64, usize, ParamSet<f32>, ParamSet<f32>)> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.total_epochs() {
        let lr = learning_rate(cfg.lr, epoch, cfg.epochs_constant, cfg.epochs_decay);
        order.shuffle(&mut rng);
        let (mut nll_sum, mut nll_count) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let samples: Vec<Sample<f32>> = batch
                .iter()
                .map(|&i| {
                    let mask = sample_training_mask(&mut rng, &sampler)?;
                    Sample::new(ComplexImage::from_real(&train_set.items[i].image), mask)
                })
                .collect::<Result<_>>()?;
            let recon_execs: Vec<Executor<'_, f32>> = samples
                .par_iter()
                .map(|s| nets.recon_exec(s, &recon_params))
                .collect::<Result<_>>()?;

            // evaluator step on detached final reconstructions
            let r_final = *nets.recon.outputs.last().expect("cascade");
            let eval_grads: Vec<Vec<Tensor<f32>>> = samples
                .par_iter()
                .zip(&recon_execs)
                .map(|(s, ex)| {
                    let r = ex.value(r_final)?;
                    let r64 = crate::models::tensor_image(r, crate::kspace::Domain::Image)?;
                    let t = evaluator_targets(&r64, &s.x, &s.mask, cfg.evaluator_loss, gamma)?;
                    Ok(nets.evaluator_gradient(r, s, &eval_params, &t)?.1)
                })
                .collect::<Result<_>>()?;
            let mut g = mean_grads(eval_grads);
            clip_global_norm(&mut g, cfg.clip_norm);
            eval_opt.step(&mut eval_params, &g, lr)?;

            // reconstructor step against the updated evaluator
            let recon_grads: Vec<(f64, Vec<Tensor<f32>>)> = samples
                .par_iter()
                .zip(&recon_execs)
                .map(|(s, ex)| {
                    let (_, nll, g) = nets.reconstructor_gradient(ex, s, &eval_params, cfg.beta)?;
                    Ok((nll, g))
                })
                .collect::<Result<_>>()?;
            drop(recon_execs);
            let mut per_sample = Vec::with_capacity(recon_grads.len());
            for (nll, g) in recon_grads {
                nll_sum += nll;
                nll_count += 1;
                per_sample.push(g);
            }
            let mut g = mean_grads(per_sample);
            clip_global_norm(&mut g, cfg.clip_norm);
            recon_opt.step(&mut recon_params, &g, lr)?;
        }

        let model = Model::new(model_cfg, recon_params.clone(), eval_params.clone())?;
        let vm = validate_model(&model, &val_pairs, cfg.evaluator_loss, gamma);
        let vm = match vm {
            Ok(v) => v,
            Err(e) => return Err(CoreError::Diverged(format!("validation failed at epoch {epoch}: {e}"))),
        };
        let row = EpochLog {
            epoch,
            lr,
            train_nll: nll_sum / nll_count.max(1) as f64,
            val_mse: vm.mse,
            val_ssim: vm.ssim,
            val_nll: vm.nll,
            val_eval_loss: vm.eval_loss,
        };
        log::info!("{}", row.csv_row());
        on_epoch(&row);
        log_rows.push(row);
        val_nlls.push(vm.nll);
        if diverged(&val_nlls) {
            return Err(CoreError::Diverged(format!(
                "validation NLL {} at epoch {epoch}",
                vm.nll
            )));
        }
        if best.as_ref().map_or(true, |b| vm.mse < b.0) {
            best = Some((vm.mse, epoch, recon_params.clone(), eval_params.clone()));
        }
    }

    let final_model = Model::new(model_cfg, recon_params, eval_params)?;
    let (best_model, best_epoch) = match best {
        Some((_, e, rp, ep)) => (Model::new(model_cfg, rp, ep)?, e),
        None => (Model::new(model_cfg, final_model.recon_params.clone(), final_model.eval_params.clone())?, 0),
    };
    Ok(TrainOutcome {
        final_model,
        best_model,
        best_epoch,
        gamma,
        log: log_rows,
    })
}

/// Writes `log.csv`, `final.aksp`, `best.aksp` and `gamma.txt` into `dir`.
pub fn write_outcome(dir: &Path, outcome: &TrainOutcome) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    let mut csv = String::from(LOG_HEADER);
    csv.push('\n');
    for row in &outcome.log {
        csv.push_str(&row.csv_row());
        csv.push('\n');
    }
    let log_path = dir.join("log.csv");
    std::fs::write(&log_path, csv).map_err(|e| CoreError::io(&log_path, e))?;
    outcome.final_model.save(&dir.join("final.aksp"))?;
    outcome.best_model.save(&dir.join("best.aksp"))?;
    let gamma_path = dir.join("gamma.txt");
    std::fs::write(&gamma_path, format!("gamma={}\nbest_epoch={}\n", outcome.gamma, outcome.best_epoch))
        .map_err(|e| CoreError::io(&gamma_path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_values() {
        let lr = |e| learning_rate(6e-4, e, 10, 10);
        assert_eq!(lr(1), 6e-4);
        assert_eq!(lr(10), 6e-4);
        assert!((lr(20) - 6e-5).abs() < 1e-15);
        assert_eq!(lr(21), 0.0);
        assert!((lr(15) - 3.6e-4).abs() < 1e-15);
        assert_eq!(learning_rate(1.0, 3, 2, 0), 0.0);
    }

    #[test]
    fn divergence_rule() {
        assert!(!diverged(&[1.0, 2.0, 3.0]));
        assert!(diverged(&[1.0, f64::NAN]));
        assert!(diverged(&[1.0, 1.0, 1.0, 10.5]));
        assert!(!diverged(&[1.0, 1.0, 1.0, 9.5]));
        assert!(!diverged(&[0.01, 0.01, 0.01, 5.0]));
    }

    #[test]
    fn config_parsing_and_echo() {
        let mut cfg = TrainConfig::default();
        cfg.set("gamma", "12.5").unwrap();
        cfg.set("evaluator_loss", "binary").unwrap();
        assert_eq!(cfg.gamma, GammaSetting::Fixed(12.5));
        assert!(cfg.set("evaluator_loss", "mse").is_err());
        assert!(cfg.set("nope", "1").is_err());
        let text = cfg.to_text();
        assert!(text.contains("beta=0.1\n"));
        let mut back = TrainConfig::default();
        for line in text.lines() {
            let (k, v) = line.split_once('=').unwrap();
            back.set(k, v).unwrap();
        }
        assert_eq!(back, cfg);
        assert_eq!(TrainConfig::full_scale().gamma, GammaSetting::Fixed(100.0));
    }

    #[test]
    fn loss_values() {
        assert_eq!(evaluator_loss(&[0.5, 1.0], &[0.5, 1.0]).unwrap(), 0.0);
        assert_eq!(evaluator_loss(&[0.0, 1.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert!(evaluator_loss(&[0.0], &[1.0, 1.0]).is_err());
    }
}

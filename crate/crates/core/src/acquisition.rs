//! Closed-loop active acquisition: policies, state stepping, stopping and policy comparison.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::data::{encode_pgm, rng_from_seed, Dataset, SimRng};
use crate::error::{CoreError, Result};
use crate::kspace::{apply_mask, kma, simulate_kspace, zero_fill, ComplexImage, RealGrid, SamplingMask};
use crate::metrics::{mean_std, mse, ssim, SSIM_WINDOW};
use crate::models::{EvaluatorScores, Model, ReconstructionResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PolicyKind {
    /// Uniformly random pair, zero-filled (copy-only) reconstruction.
    RandomC,
    /// Uniformly random pair, network reconstruction.
    RandomCR,
    /// Lowest-frequency pair first, zero-filled reconstruction.
    OrderC,
    /// Lowest-frequency pair first, network reconstruction.
    OrderCR,
    /// Pair with the lowest mean evaluator score.
    EvaluatorGreedy,
    /// Pair whose acquisition minimises the true next-step MSE.
    OracleGreedy,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 6] = [
        PolicyKind::RandomC,
        PolicyKind::RandomCR,
        PolicyKind::OrderC,
        PolicyKind::OrderCR,
        PolicyKind::EvaluatorGreedy,
        PolicyKind::OracleGreedy,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().replace('_', "-").as_str() {
            "random-c" => Ok(Self::RandomC),
            "random-cr" => Ok(Self::RandomCR),
            "order-c" => Ok(Self::OrderC),
            "order-cr" => Ok(Self::OrderCR),
            "eval-greedy" | "evaluator-greedy" => Ok(Self::EvaluatorGreedy),
            "oracle" | "oracle-greedy" => Ok(Self::OracleGreedy),
            other => Err(CoreError::Invalid(format!("unknown policy `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::RandomC => "random_c",
            Self::RandomCR => "random_cr",
            Self::OrderC => "order_c",
            Self::OrderCR => "order_cr",
            Self::EvaluatorGreedy => "evaluator_greedy",
            Self::OracleGreedy => "oracle_greedy",
        }
    }

    /// Policies that require trained networks.
    pub fn requires_model(self) -> bool {
        matches!(self, Self::RandomCR | Self::OrderCR | Self::EvaluatorGreedy)
    }
}

/// A selection rule with its random stream.
pub struct Policy {
    pub kind: PolicyKind,
    rng: SimRng,
}

impl Policy {
    pub fn new(kind: PolicyKind, seed: u64) -> Self {
        Self {
            kind,
            rng: rng_from_seed(seed),
        }
    }
}

/// Loop state for one image.
pub struct AcquisitionState<'m> {
    pub truth: ComplexImage,
    pub kspace: ComplexImage,
    pub mask: SamplingMask,
    pub zero_filled: ComplexImage,
    pub recon: Option<ReconstructionResult>,
    pub scores: Option<EvaluatorScores>,
    pub step: usize,
    model: Option<&'m Model>,
}

impl<'m> AcquisitionState<'m> {
    /// Starts from `initial_mask`; `model` is used for reconstruction and scoring when given.
    pub fn new(image: &RealGrid, initial_mask: SamplingMask, model: Option<&'m Model>) -> Result<Self> {
        if !initial_mask.is_symmetric() {
            return Err(CoreError::Contract("initial mask is not conjugate-symmetric".into()));
        }
        if initial_mask.n_rows() != image.size() {
            return Err(CoreError::SizeMismatch("initial mask does not match the image".into()));
        }
        if let Some(m) = model {
            if m.image_size() != image.size() {
                return Err(CoreError::SizeMismatch(format!(
                    "model expects {0}x{0} images, got {1}x{1}",
                    m.image_size(),
                    image.size()
                )));
            }
        }
        let kspace = simulate_kspace(image);
        let zero_filled = zero_fill(&apply_mask(&kspace, &initial_mask)?)?;
        let mut state = Self {
            truth: ComplexImage::from_real(image),
            kspace,
            mask: initial_mask,
            zero_filled,
            recon: None,
            scores: None,
            step: 0,
            model,
        };
        state.refresh()?;
        Ok(state)
    }

    fn refresh(&mut self) -> Result<()> {
        if let Some(m) = self.model {
            let res = m.reconstruct(&self.zero_filled, &self.mask)?;
            self.scores = Some(m.evaluate(res.r(), &self.mask)?);
            self.recon = Some(res);
        }
        Ok(())
    }

    /// Current best estimate: the network output when available, else the zero-filled image.
    pub fn estimate(&self) -> &ComplexImage {
        self.recon.as_ref().map_or(&self.zero_filled, |r| r.r())
    }

    pub fn uses_model(&self) -> bool {
        self.model.is_some()
    }

    pub fn unobserved_pairs(&self) -> Vec<usize> {
        self.mask.unobserved_pairs()
    }

    pub fn kma(&self) -> f64 {
        kma(&self.mask).expect("state mask stays symmetric")
    }

    /// Acquires both rows of `pair`, recomputes the zero-filled image and re-runs the networks.
    pub fn acquire(&mut self, pair: usize) -> Result<()> {
        if self.mask.is_pair_observed(pair) {
            return Err(CoreError::Invalid(format!("pair {pair} is already observed")));
        }
        self.mask.observe_pair(pair)?;
        self.zero_filled = zero_fill(&apply_mask(&self.kspace, &self.mask)?)?;
        self.step += 1;
        self.refresh()
    }

    /// MSE of the estimate that acquiring `pair` would produce.
    fn lookahead_mse(&self, pair: usize) -> Result<f64> {
        let mut mask = self.mask.clone();
        mask.observe_pair(pair)?;
        let zf = zero_fill(&apply_mask(&self.kspace, &mask)?)?;
        match self.model {
            Some(m) => mse(m.reconstruct(&zf, &mask)?.r(), &self.truth),
            None => mse(&zf, &self.truth),
        }
    }

    pub fn mean_uncertainty(&self) -> Option<f64> {
        self.recon.as_ref().map(|r| r.u().mean())
    }

    /// Mean evaluator score over unobserved rows.
    pub fn mean_unobserved_score(&self) -> Option<f64> {
        let scores = self.scores.as_ref()?;
        let rows: Vec<f64> = (0..self.mask.n_rows())
            .filter(|&r| !self.mask.is_observed(r))
            .map(|r| scores.values[r])
            .collect();
        (!rows.is_empty()).then(|| rows.iter().sum::<f64>() / rows.len() as f64)
    }
}

/// Chooses the next pair to acquire.
pub fn select_next(policy: &mut Policy, state: &AcquisitionState<'_>) -> Result<usize> {
    let open = state.unobserved_pairs();
    if open.is_empty() {
        return Err(CoreError::Invalid("every measurement is already observed".into()));
    }
    if open.len() == 1 {
        return Ok(open[0]);
    }
    let argmin = |values: Vec<f64>| -> usize {
        // strict comparison keeps the lowest pair index on ties
        let mut best = 0;
        for (i, v) in values.iter().enumerate() {
            if *v < values[best] {
                best = i;
            }
        }
        open[best]
    };
    match policy.kind {
        PolicyKind::RandomC | PolicyKind::RandomCR => Ok(*open.choose(&mut policy.rng).expect("non-empty")),
        PolicyKind::OrderC | PolicyKind::OrderCR => Ok(open[0]),
        PolicyKind::EvaluatorGreedy => {
            let scores = state
                .scores
                .as_ref()
                .ok_or_else(|| CoreError::Invalid("evaluator-greedy needs a trained model".into()))?;
            Ok(argmin(
                open.iter()
                    .map(|&p| {
                        let rows = state.mask.pair_rows(p);
                        rows.iter().map(|&r| scores.values[r]).sum::<f64>() / rows.len() as f64
                    })
                    .collect(),
            ))
        }
        PolicyKind::OracleGreedy => Ok(argmin(
            open.iter()
                .map(|&p| state.lookahead_mse(p))
                .collect::<Result<Vec<_>>>()?,
        )),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StopRule {
    /// Maximum number of acquisitions; `None` runs until every row is observed.
    pub budget: Option<usize>,
    /// Stop once the mean predicted variance drops below this value.
    pub uncertainty_threshold: Option<f64>,
}

impl StopRule {
    pub fn unlimited() -> Self {
        Self {
            budget: None,
            uncertainty_threshold: None,
        }
    }

    pub fn validate(&self, uses_model: bool) -> Result<()> {
        if let Some(t) = self.uncertainty_threshold {
            if t.is_nan() || t <= 0.0 {
                return Err(CoreError::Invalid(format!("uncertainty threshold {t} must be positive")));
            }
            if !uses_model {
                return Err(CoreError::Invalid(
                    "an uncertainty threshold needs a policy that runs the reconstructor".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    /// Rows acquired at this step; `None` for the initial observation.
    pub row_pair: Option<(usize, usize)>,
    pub kma: f64,
    pub mse: f64,
    pub ssim: Option<f64>,
    pub mean_uncertainty: Option<f64>,
    pub mean_eval_score: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AcquisitionTrace {
    pub rows: Vec<TraceRow>,
    pub stopped_by_uncertainty: bool,
}

pub const TRACE_HEADER: &str = "step,row_pair,kma,mse,ssim,mean_uncertainty,mean_eval_score";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl AcquisitionTrace {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{TRACE_HEADER}\n");
        for r in &self.rows {
            let pair = r.row_pair.map(|(a, b)| format!("{a}-{b}")).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.step,
                pair,
                r.kma,
                r.mse,
                opt(r.ssim),
                opt(r.mean_uncertainty),
                opt(r.mean_eval_score)
            );
        }
        s
    }

    pub fn last(&self) -> &TraceRow {
        self.rows.last().expect("trace holds the initial row")
    }
}

fn record(state: &AcquisitionState<'_>, row_pair: Option<(usize, usize)>) -> Result<TraceRow> {
    let est = state.estimate();
    let ssim_val = if est.size() >= SSIM_WINDOW {
        Some(ssim(&est.real_part(), &state.truth.real_part())?)
    } else {
        None
    };
    Ok(TraceRow {
        step: state.step,
        row_pair,
        kma: state.kma(),
        mse: mse(est, &state.truth)?,
        ssim: ssim_val,
        mean_uncertainty: state.mean_uncertainty(),
        mean_eval_score: state.mean_unobserved_score(),
    })
}

fn normalized(values: &[f64]) -> Vec<f64> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = hi - lo;
    values
        .iter()
        .map(|v| if span > 0.0 { (v - lo) / span } else { 0.0 })
        .collect()
}

/// Writes per-frame normalized PGMs of |r|, |r - x| and (when present) the variance map.
pub fn dump_frames(dir: &Path, state: &AcquisitionState<'_>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    let n = state.truth.size();
    let est = state.estimate();
    let mut frames = vec![
        ("recon", est.magnitude().data().to_vec()),
        ("error", est.sub(&state.truth)?.magnitude().data().to_vec()),
    ];
    if let Some(r) = &state.recon {
        frames.push(("uncertainty", r.u().data().to_vec()));
    }
    for (tag, values) in frames {
        let path = dir.join(format!("step_{:03}_{tag}.pgm", state.step));
        fs::write(&path, encode_pgm(n, n, &normalized(&values))).map_err(|e| CoreError::io(&path, e))?;
    }
    Ok(())
}

/// Runs select → acquire → record until every row is observed, the budget is spent or
/// the mean uncertainty falls below the threshold.
pub fn run_simulation(
    policy: &mut Policy,
    model: Option<&Model>,
    image: &RealGrid,
    initial_mask: &SamplingMask,
    stop: &StopRule,
    frames: Option<&Path>,
) -> Result<AcquisitionTrace> {
    let wants_model = policy.kind.requires_model() || (policy.kind == PolicyKind::OracleGreedy && model.is_some());
    if policy.kind.requires_model() && model.is_none() {
        return Err(CoreError::Invalid(format!(
            "policy {} needs a trained checkpoint",
            policy.kind.name()
        )));
    }
    stop.validate(wants_model)?;
    let mut state = AcquisitionState::new(image, initial_mask.clone(), if wants_model { model } else { None })?;
    let mut rows = vec![record(&state, None)?];
    if let Some(dir) = frames {
        dump_frames(dir, &state)?;
    }
    let below = |row: &TraceRow| {
        matches!((row.mean_uncertainty, stop.uncertainty_threshold), (Some(u), Some(t)) if u < t)
    };
    let mut stopped_by_uncertainty = below(&rows[0]);
    while !stopped_by_uncertainty
        && !state.unobserved_pairs().is_empty()
        && stop.budget.map_or(true, |b| state.step < b)
    {
        let pair = select_next(policy, &state)?;
        state.acquire(pair)?;
        let n = state.mask.n_rows();
        let row = record(&state, Some((pair, (n - pair) % n)))?;
        stopped_by_uncertainty = below(&row);
        rows.push(row);
        if let Some(dir) = frames {
            dump_frames(dir, &state)?;
        }
    }
    Ok(AcquisitionTrace {
        rows,
        stopped_by_uncertainty,
    })
}

/// Mean curve of one policy over a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyCurve {
    pub policy: PolicyKind,
    pub kma: Vec<f64>,
    pub mse_mean: Vec<f64>,
    pub mse_std: Vec<f64>,
    pub ssim_mean: Vec<f64>,
    pub ssim_std: Vec<f64>,
    /// Trapezoidal area under the mean MSE-vs-kMA curve.
    pub auc_mse: f64,
    pub traces: Vec<AcquisitionTrace>,
}

pub fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2)
        .zip(y.windows(2))
        .map(|(xs, ys)| (xs[1] - xs[0]) * (ys[0] + ys[1]) / 2.0)
        .sum()
}

/// Random-policy seed for one image, so runs are independent of evaluation order.
pub fn image_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (index as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

/// Runs every policy over every image from the same initial mask.
pub fn compare_policies(
    policies: &[PolicyKind],
    dataset: &Dataset,
    model: Option<&Model>,
    initial_mask: &SamplingMask,
    budget: Option<usize>,
    seed: u64,
) -> Result<Vec<PolicyCurve>> {
    if dataset.is_empty() {
        return Err(CoreError::Invalid("empty dataset".into()));
    }
    if let Some(p) = policies.iter().find(|p| p.requires_model()) {
        if model.is_none() {
            return Err(CoreError::Invalid(format!("policy {} needs a trained checkpoint", p.name())));
        }
    }
    let stop = StopRule {
        budget,
        uncertainty_threshold: None,
    };
    policies
        .iter()
        .map(|&kind| {
            let traces: Vec<AcquisitionTrace> = dataset
                .items
                .par_iter()
                .enumerate()
                .map(|(i, it)| {
                    let mut policy = Policy::new(kind, image_seed(seed, i));
                    run_simulation(&mut policy, model, &it.image, initial_mask, &stop, None)
                })
                .collect::<Result<_>>()?;
            let steps = traces.iter().map(|t| t.rows.len()).min().unwrap_or(0);
            let column = |f: &dyn Fn(&TraceRow) -> f64| -> (Vec<f64>, Vec<f64>) {
                (0..steps)
                    .map(|s| mean_std(&traces.iter().map(|t| f(&t.rows[s])).collect::<Vec<_>>()))
                    .unzip()
            };
            let (kma_mean, _) = column(&|r| r.kma);
            let (mse_mean, mse_std) = column(&|r| r.mse);
            let (ssim_mean, ssim_std) = column(&|r| r.ssim.unwrap_or(f64::NAN));
            Ok(PolicyCurve {
                policy: kind,
                auc_mse: trapezoid(&kma_mean, &mse_mean),
                kma: kma_mean,
                mse_mean,
                mse_std,
                ssim_mean,
                ssim_std,
                traces,
            })
        })
        .collect()
}

pub const CURVE_HEADER: &str = "policy,step,kma,mse_mean,mse_std,ssim_mean,ssim_std";

pub fn curves_csv(curves: &[PolicyCurve]) -> String {
    let mut s = format!("{CURVE_HEADER}\n");
    for c in curves {
        for i in 0..c.kma.len() {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                c.policy.name(),
                i,
                c.kma[i],
                c.mse_mean[i],
                c.mse_std[i],
                c.ssim_mean[i],
                c.ssim_std[i]
            );
        }
    }
    s
}

pub fn auc_csv(curves: &[PolicyCurve]) -> String {
    let mut s = String::from("policy,auc_mse\n");
    for c in curves {
        let _ = writeln!(s, "{},{}", c.policy.name(), c.auc_mse);
    }
    s
}

/// Directory for per-step frames of one image, if frames are requested.
pub fn frame_dir(root: Option<&Path>, image_id: &str) -> Option<PathBuf> {
    root.map(|r| r.join(image_id))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policy_names_roundtrip() {
        for k in PolicyKind::ALL {
            assert_eq!(PolicyKind::parse(k.name()).unwrap(), k);
        }
        assert_eq!(PolicyKind::parse("eval-greedy").unwrap(), PolicyKind::EvaluatorGreedy);
        assert_eq!(PolicyKind::parse("oracle").unwrap(), PolicyKind::OracleGreedy);
        assert!(PolicyKind::parse("best").is_err());
    }

    #[test]
    fn trapezoid_area() {
        assert_eq!(trapezoid(&[0.0, 1.0, 2.0], &[1.0, 1.0, 3.0]), 3.0);
        assert_eq!(trapezoid(&[0.0], &[1.0]), 0.0);
    }

    #[test]
    fn stop_rule_validation() {
        let bad = StopRule { budget: None, uncertainty_threshold: Some(-1.0) };
        assert!(bad.validate(true).is_err());
        let plain = StopRule { budget: None, uncertainty_threshold: Some(0.5) };
        assert!(plain.validate(false).is_err());
        assert!(plain.validate(true).is_ok());
        assert!(StopRule::unlimited().validate(false).is_ok());
    }
}

//! Metric sweeps over datasets: kMA curves, per-image MSE distributions, uncertainty
//! correlation and evaluator score statistics.

use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;

use crate::data::{mask_at_kma, rng_from_seed, Dataset};
use crate::error::{CoreError, Result};
use crate::kspace::{apply_mask, simulate_kspace, zero_fill, ComplexImage, SamplingMask};
use crate::metrics::{mean_std, mse, pearson, ssim, Quartiles, SSIM_WINDOW};
use crate::models::Model;

/// Reconstruction used by a sweep.
#[derive(Clone, Copy)]
pub enum Reconstruction<'a> {
    /// Identity reconstructor: the zero-filled image.
    ZeroFill,
    Network(&'a Model),
}

struct Case {
    id: String,
    kma: f64,
    x: ComplexImage,
    mask: SamplingMask,
}

struct Outcome {
    mse: f64,
    ssim: Option<f64>,
    mean_uncertainty: Option<f64>,
    mean_unobserved_score: Option<f64>,
    unobserved_scores: Vec<f64>,
}

fn run_case(recon: Reconstruction<'_>, case: &Case, with_scores: bool) -> Result<Outcome> {
    let x = &case.x;
    let zf = zero_fill(&apply_mask(&crate::kspace::dft2(x)?, &case.mask)?)?;
    let (r, u, scores) = match recon {
        Reconstruction::ZeroFill => (zf, None, None),
        Reconstruction::Network(m) => {
            let res = m.reconstruct(&zf, &case.mask)?;
            let scores = if with_scores {
                Some(m.evaluate(res.r(), &case.mask)?.values)
            } else {
                None
            };
            (res.r().clone(), Some(res.u().mean()), scores)
        }
    };
    let unobserved_scores: Vec<f64> = scores
        .map(|s| (0..s.len()).filter(|&i| !case.mask.is_observed(i)).map(|i| s[i]).collect())
        .unwrap_or_default();
    let ssim_val = if x.size() >= SSIM_WINDOW {
        Some(ssim(&r.real_part(), &x.real_part())?)
    } else {
        None
    };
    Ok(Outcome {
        mse: mse(&r, x)?,
        ssim: ssim_val,
        mean_uncertainty: u,
        mean_unobserved_score: (!unobserved_scores.is_empty())
            .then(|| unobserved_scores.iter().sum::<f64>() / unobserved_scores.len() as f64),
        unobserved_scores,
    })
}

fn check_levels(levels: &[f64]) -> Result<()> {
    if levels.is_empty() {
        return Err(CoreError::Invalid("empty kMA grid".into()));
    }
    if let Some(bad) = levels.iter().find(|&&k| !(k > 0.0 && k <= 1.0)) {
        return Err(CoreError::Invalid(format!("kMA {bad} outside (0, 1]")));
    }
    Ok(())
}

/// One fresh random mask per (level, image), reproducible from `seed`.
fn level_cases(dataset: &Dataset, levels: &[f64], fixed_pairs: usize, seed: u64) -> Result<Vec<Vec<Case>>> {
    if dataset.is_empty() {
        return Err(CoreError::Invalid("empty dataset".into()));
    }
    check_levels(levels)?;
    levels
        .iter()
        .enumerate()
        .map(|(li, &k)| {
            let mut rng = rng_from_seed(seed.wrapping_add(1_000_003 * li as u64));
            dataset
                .items
                .iter()
                .map(|it| {
                    Ok(Case {
                        id: it.id.clone(),
                        kma: k,
                        x: ComplexImage::from_real(&it.image),
                        mask: mask_at_kma(&mut rng, it.image.size(), k, fixed_pairs)?,
                    })
                })
                .collect()
        })
        .collect()
}

fn run_all(recon: Reconstruction<'_>, cases: &[Case], with_scores: bool) -> Result<Vec<Outcome>> {
    cases.par_iter().map(|c| run_case(recon, c, with_scores)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub kma: f64,
    pub mse_mean: f64,
    pub mse_std: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
}

/// Mean and standard deviation of MSE and SSIM per kMA level.
pub fn kma_sweep(
    recon: Reconstruction<'_>,
    dataset: &Dataset,
    levels: &[f64],
    fixed_pairs: usize,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    let cases = level_cases(dataset, levels, fixed_pairs, seed)?;
    cases
        .iter()
        .zip(levels)
        .map(|(level, &k)| {
            let out = run_all(recon, level, false)?;
            let (mse_mean, mse_std) = mean_std(&out.iter().map(|o| o.mse).collect::<Vec<_>>());
            let (ssim_mean, ssim_std) =
                mean_std(&out.iter().map(|o| o.ssim.unwrap_or(f64::NAN)).collect::<Vec<_>>());
            Ok(SweepRow {
                kma: k,
                mse_mean,
                mse_std,
                ssim_mean,
                ssim_std,
            })
        })
        .collect()
}

pub const SWEEP_HEADER: &str = "kma,mse_mean,mse_std,ssim_mean,ssim_std";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("{SWEEP_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.kma, r.mse_mean, r.mse_std, r.ssim_mean, r.ssim_std);
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct MseLevel {
    pub kma: f64,
    pub per_image: Vec<(String, f64)>,
    pub quartiles: Quartiles,
}

/// Per-image MSE at each kMA level under fresh random masks.
pub fn mse_distribution(
    recon: Reconstruction<'_>,
    dataset: &Dataset,
    levels: &[f64],
    fixed_pairs: usize,
    seed: u64,
) -> Result<Vec<MseLevel>> {
    let cases = level_cases(dataset, levels, fixed_pairs, seed)?;
    cases
        .iter()
        .zip(levels)
        .map(|(level, &k)| {
            let out = run_all(recon, level, false)?;
            let per_image: Vec<(String, f64)> = level.iter().zip(&out).map(|(c, o)| (c.id.clone(), o.mse)).collect();
            let quartiles = Quartiles::of(&out.iter().map(|o| o.mse).collect::<Vec<_>>())?;
            Ok(MseLevel {
                kma: k,
                per_image,
                quartiles,
            })
        })
        .collect()
}

pub fn distribution_csv(levels: &[MseLevel]) -> String {
    let mut s = String::from("kma,image_id,mse\n");
    for l in levels {
        for (id, m) in &l.per_image {
            let _ = writeln!(s, "{},{id},{m}", l.kma);
        }
    }
    s
}

pub fn quartiles_csv(levels: &[MseLevel]) -> String {
    let mut s = String::from("kma,min,q1,median,q3,max\n");
    for l in levels {
        let q = &l.quartiles;
        let _ = writeln!(s, "{},{},{},{},{},{}", l.kma, q.min, q.q1, q.median, q.q3, q.max);
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyPoint {
    pub image_id: String,
    pub kma: f64,
    pub mse: f64,
    pub mean_uncertainty: f64,
}

/// `count` (image, random mask) pairs with kMA uniform in `[kma_lo, kma_hi]`, cycling through
/// the dataset; returns the points and their Pearson correlation.
pub fn uncertainty_correlation(
    model: &Model,
    dataset: &Dataset,
    count: usize,
    kma_lo: f64,
    kma_hi: f64,
    fixed_pairs: usize,
    seed: u64,
) -> Result<(Vec<UncertaintyPoint>, f64)> {
    if dataset.is_empty() || count < 2 {
        return Err(CoreError::Invalid("need a non-empty dataset and at least two pairs".into()));
    }
    check_levels(&[kma_lo, kma_hi])?;
    let mut rng = rng_from_seed(seed);
    let cases: Vec<Case> = (0..count)
        .map(|i| {
            let it = &dataset.items[i % dataset.len()];
            let k = rng.gen_range(kma_lo..=kma_hi);
            Ok(Case {
                id: it.id.clone(),
                kma: k,
                x: ComplexImage::from_real(&it.image),
                mask: mask_at_kma(&mut rng, it.image.size(), k, fixed_pairs)?,
            })
        })
        .collect::<Result<_>>()?;
    let out = run_all(Reconstruction::Network(model), &cases, false)?;
    let points: Vec<UncertaintyPoint> = cases
        .iter()
        .zip(&out)
        .map(|(c, o)| UncertaintyPoint {
            image_id: c.id.clone(),
            kma: c.kma,
            mse: o.mse,
            mean_uncertainty: o.mean_uncertainty.expect("network reconstruction"),
        })
        .collect();
    let r = pearson(
        &points.iter().map(|p| p.mse).collect::<Vec<_>>(),
        &points.iter().map(|p| p.mean_uncertainty).collect::<Vec<_>>(),
    )?;
    Ok((points, r))
}

pub fn uncertainty_csv(points: &[UncertaintyPoint]) -> String {
    let mut s = String::from("image_id,kma,mse,mean_uncertainty\n");
    for p in points {
        let _ = writeln!(s, "{},{},{},{}", p.image_id, p.kma, p.mse, p.mean_uncertainty);
    }
    s
}

/// Evaluator statistics on unobserved rows at one kMA level.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreLevel {
    pub kma: f64,
    pub mean_unobserved_score: f64,
    /// Fraction of unobserved-row scores outside `[0.2, 0.8]`.
    pub polarization: f64,
}

pub fn evaluator_score_levels(
    model: &Model,
    dataset: &Dataset,
    levels: &[f64],
    fixed_pairs: usize,
    seed: u64,
) -> Result<Vec<ScoreLevel>> {
    let cases = level_cases(dataset, levels, fixed_pairs, seed)?;
    cases
        .iter()
        .zip(levels)
        .map(|(level, &k)| {
            let out = run_all(Reconstruction::Network(model), level, true)?;
            let means: Vec<f64> = out.iter().filter_map(|o| o.mean_unobserved_score).collect();
            let all: Vec<f64> = out.iter().flat_map(|o| o.unobserved_scores.iter().copied()).collect();
            let outside = all.iter().filter(|&&s| !(0.2..=0.8).contains(&s)).count();
            Ok(ScoreLevel {
                kma: k,
                mean_unobserved_score: mean_std(&means).0,
                polarization: outside as f64 / all.len().max(1) as f64,
            })
        })
        .collect()
}

/// Zero-filled reconstruction of a real image under `mask`.
pub fn zero_filled_image(image: &crate::kspace::RealGrid, mask: &SamplingMask) -> Result<ComplexImage> {
    zero_fill(&apply_mask(&simulate_kspace(image), mask)?)
}

//! Reconstruction quality, Gaussian likelihood, evaluator targets and correlation statistics.

use crate::error::{CoreError, Result};
use crate::kspace::{row_error_energy, ComplexImage, RealGrid};

/// Mean squared complex modulus of `r - x` over all pixels.
pub fn mse(r: &ComplexImage, x: &ComplexImage) -> Result<f64> {
    let n2 = (r.size() * r.size()) as f64;
    Ok(r.sub(x)?.norm_sqr() / n2)
}

pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - half).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = g.iter().sum();
    g.into_iter().map(|v| v / total).collect()
}

/// Mean local SSIM over all fully contained 11×11 Gaussian windows, with dynamic range `range`.
///
/// Symmetric in its two image arguments. A non-positive range falls back to 1 so that
/// equal constant images score exactly 1.
pub fn ssim_with_range(a: &RealGrid, b: &RealGrid, range: f64) -> Result<f64> {
    let n = a.size();
    if b.size() != n {
        return Err(CoreError::SizeMismatch(format!("{n}x{n} vs {0}x{0}", b.size())));
    }
    if n < SSIM_WINDOW {
        return Err(CoreError::Dimension(format!(
            "image {n}x{n} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let l = if range > 1e-12 { range } else { 1.0 };
    let c1 = (SSIM_K1 * l).powi(2);
    let c2 = (SSIM_K2 * l).powi(2);
    let w = gaussian_window();
    let out = n - SSIM_WINDOW + 1;
    let (da, db) = (a.data(), b.data());
    let mut total = 0.0;
    for oi in 0..out {
        for oj in 0..out {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (ki, wi) in w.iter().enumerate() {
                let row = (oi + ki) * n + oj;
                for (kj, wj) in w.iter().enumerate() {
                    let weight = wi * wj;
                    let (va, vb) = (da[row + kj], db[row + kj]);
                    ma += weight * va;
                    mb += weight * vb;
                    saa += weight * va * va;
                    sbb += weight * vb * vb;
                    sab += weight * va * vb;
                }
            }
            let var_a = saa - ma * ma;
            let var_b = sbb - mb * mb;
            let cov = sab - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
        }
    }
    Ok(total / (out * out) as f64)
}

/// SSIM of reconstruction `r` against ground truth `x`, with range `max(x) - min(x)`.
pub fn ssim(r: &RealGrid, x: &RealGrid) -> Result<f64> {
    let (lo, hi) = x.min_max();
    ssim_with_range(r, x, hi - lo)
}

/// Heteroscedastic Gaussian negative log-likelihood averaged over pixels:
/// `(1/N²) Σ |r - x|² / (2u) + ½ log(2πu)`.
pub fn gaussian_nll(r: &ComplexImage, x: &ComplexImage, u: &RealGrid) -> Result<f64> {
    let diff = r.sub(x)?;
    if u.size() != r.size() {
        return Err(CoreError::SizeMismatch(format!(
            "variance grid {0}x{0} for a {1}x{1} image",
            u.size(),
            r.size()
        )));
    }
    let mut total = 0.0;
    for ((re, im), &var) in diff.re().iter().zip(diff.im()).zip(u.data()) {
        if !(var > 0.0 && var.is_finite()) {
            return Err(CoreError::MathDomain(format!("variance {var} is not positive and finite")));
        }
        total += (re * re + im * im) / (2.0 * var) + 0.5 * (2.0 * std::f64::consts::PI * var).ln();
    }
    Ok(total / u.data().len() as f64)
}

/// Per-row evaluator targets in `(0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetScores {
    pub values: Vec<f64>,
}

/// `t_i = exp(-γ ||M(r)⁽ⁱ⁾ - M(x)⁽ⁱ⁾||²)`, floored at the smallest positive f64.
pub fn target_scores(r: &ComplexImage, x: &ComplexImage, gamma: f64) -> Result<TargetScores> {
    Ok(TargetScores {
        values: targets_from_energy(&row_error_energy(r, x)?, gamma)?,
    })
}

pub fn targets_from_energy(energy: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(CoreError::MathDomain(format!("gamma must be positive, got {gamma}")));
    }
    Ok(energy
        .iter()
        .map(|&e| (-gamma * e).exp().max(f64::MIN_POSITIVE))
        .collect())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample Pearson correlation coefficient.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(CoreError::SizeMismatch(format!("{} vs {} samples", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(CoreError::MathDomain("correlation needs at least two samples".into()));
    }
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(CoreError::MathDomain("correlation undefined for zero variance".into()));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Ranks starting at 1, ties receiving their average rank.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut out = vec![0.0; v.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && v[order[end]] == v[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            out[i] = rank;
        }
        start = end;
    }
    out
}

/// Spearman rank correlation (Pearson on average ranks).
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    pearson(&ranks(a), &ranks(b))
}

/// Quantile with linear interpolation between order statistics.
pub fn quantile(v: &[f64], q: f64) -> Result<f64> {
    if v.is_empty() {
        return Err(CoreError::Invalid("quantile of an empty sample".into()));
    }
    let mut sorted = v.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64))
}

pub fn median_of(v: &[f64]) -> Result<f64> {
    quantile(v, 0.5)
}

/// Five-number-style summary used for the MSE box plots.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quartiles {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl Quartiles {
    pub fn of(v: &[f64]) -> Result<Self> {
        Ok(Self {
            min: quantile(v, 0.0)?,
            q1: quantile(v, 0.25)?,
            median: quantile(v, 0.5)?,
            q3: quantile(v, 0.75)?,
            max: quantile(v, 1.0)?,
        })
    }

    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }
}

/// Mean and population standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = mean(v);
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64;
    (m, var.sqrt())
}

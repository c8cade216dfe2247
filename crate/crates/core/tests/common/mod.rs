//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use akspace_core::kspace::{ComplexImage, Domain, RealGrid, SamplingMask};
use rand::Rng;

/// Direct O(N⁴) unitary 2D DFT; `inverse` flips the exponent sign.
pub fn brute_dft2(re: &[f64], im: &[f64], n: usize, inverse: bool) -> (Vec<f64>, Vec<f64>) {
    let sign = if inverse { 1.0 } else { -1.0 };
    let scale = 1.0 / n as f64;
    let mut out_re = vec![0.0; n * n];
    let mut out_im = vec![0.0; n * n];
    for u in 0..n {
        for v in 0..n {
            let (mut sr, mut si) = (0.0, 0.0);
            for y in 0..n {
                for x in 0..n {
                    let phase = sign * 2.0 * std::f64::consts::PI * ((u * y + v * x) % n) as f64 / n as f64;
                    let (c, s) = (phase.cos(), phase.sin());
                    let (a, b) = (re[y * n + x], im[y * n + x]);
                    sr += a * c - b * s;
                    si += a * s + b * c;
                }
            }
            out_re[u * n + v] = sr * scale;
            out_im[u * n + v] = si * scale;
        }
    }
    (out_re, out_im)
}

pub fn random_complex(rng: &mut impl Rng, n: usize, domain: Domain) -> ComplexImage {
    let re = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let im = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    ComplexImage::new(n, n, re, im, domain).unwrap()
}

pub fn random_grid(rng: &mut impl Rng, n: usize) -> RealGrid {
    RealGrid::new(n, n, (0..n * n).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

/// Arbitrary, possibly asymmetric, mask with each row observed with probability `p`.
pub fn random_bits(rng: &mut impl Rng, n: usize, p: f64) -> SamplingMask {
    SamplingMask::from_bits((0..n).map(|_| rng.gen_bool(p)).collect())
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Relative L2 distance between two complex images.
pub fn rel_diff(a: &ComplexImage, b: &ComplexImage) -> f64 {
    let d = a.sub(b).unwrap().norm();
    d / b.norm().max(1e-300)
}

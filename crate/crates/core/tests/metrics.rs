mod common;

use akspace_core::data::{generate_phantoms, rng_from_seed};
use akspace_core::kspace::{
    apply_mask, data_consistency, simulate_kspace, symmetrize_mask, zero_fill, ComplexImage, Domain, RealGrid,
};
use akspace_core::metrics::{
    gaussian_nll, mse, pearson, spearman, ssim, target_scores, targets_from_energy, Quartiles,
};
use akspace_core::CoreError;
use common::*;
use proptest::prelude::*;

const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_8;

#[test]
fn nll_at_zero_error_and_unit_variance() {
    let mut rng = rng_from_seed(1);
    let x = random_complex(&mut rng, 8, Domain::Image);
    let u = RealGrid::new(8, 8, vec![1.0; 64]).unwrap();
    let v = gaussian_nll(&x, &x, &u).unwrap();
    assert!((v - HALF_LOG_2PI).abs() < 1e-9, "{v}");
    assert!((HALF_LOG_2PI - 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-15);
}

#[test]
fn nll_minimizer_is_squared_residual() {
    // one residual per pixel; scan u on a log grid and refine by golden section
    let mut rng = rng_from_seed(2);
    let n = 4;
    let x = random_complex(&mut rng, n, Domain::Image);
    let r = random_complex(&mut rng, n, Domain::Image);
    for p in 0..n * n {
        let (dr, di) = (r.re()[p] - x.re()[p], r.im()[p] - x.im()[p]);
        let expected = dr * dr + di * di;
        let nll_at = |u: f64| {
            let mut grid = vec![1.0; n * n];
            grid[p] = u;
            gaussian_nll(&r, &x, &RealGrid::new(n, n, grid).unwrap()).unwrap()
        };
        let (mut lo, mut hi) = (1e-6f64.ln(), 10f64.ln());
        let phi = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..200 {
            let a = hi - phi * (hi - lo);
            let b = lo + phi * (hi - lo);
            if nll_at(a.exp()) < nll_at(b.exp()) {
                hi = b;
            } else {
                lo = a;
            }
        }
        let found = (0.5 * (lo + hi)).exp();
        assert!((found - expected).abs() < 1e-3 * expected.max(1.0), "pixel {p}: {found} vs {expected}");
    }
}

#[test]
fn nll_rejects_non_positive_variance() {
    let x = ComplexImage::zeros(4, Domain::Image).unwrap();
    let mut u = vec![1.0; 16];
    u[5] = 0.0;
    let u = RealGrid::new(4, 4, u).unwrap();
    assert!(matches!(gaussian_nll(&x, &x, &u), Err(CoreError::MathDomain(_))));
}

#[test]
fn kernel_closed_forms() {
    let t = targets_from_energy(&[0.0, 0.5, 2.0], 2.0).unwrap();
    assert_eq!(t[0], 1.0);
    assert!((t[1] - (-1.0f64).exp()).abs() < 1e-9);
    assert!((t[2] - (-4.0f64).exp()).abs() < 1e-9);
    assert!(targets_from_energy(&[1.0], 0.0).is_err());
    // extreme energies stay strictly positive
    assert!(targets_from_energy(&[1e6], 1e3).unwrap()[0] > 0.0);
}

#[test]
fn observed_rows_score_one_after_dc() {
    let ds = generate_phantoms(4, 6, 32).unwrap();
    let mut rng = rng_from_seed(4);
    for it in &ds.items {
        let x = ComplexImage::from_real(&it.image);
        let mask = symmetrize_mask(&random_bits(&mut rng, 32, 0.3));
        let x_hat = zero_fill(&apply_mask(&simulate_kspace(&it.image), &mask).unwrap()).unwrap();
        let f_out = random_complex(&mut rng, 32, Domain::Image);
        let r = data_consistency(&f_out, &x_hat, &mask).unwrap();
        let t = target_scores(&r, &x, 100.0).unwrap();
        for row in 0..32 {
            if mask.is_observed(row) {
                assert!((t.values[row] - 1.0).abs() < 1e-9, "row {row}: {}", t.values[row]);
            } else {
                assert!(t.values[row] < 1.0);
            }
        }
        // zero error everywhere gives all ones
        assert!(target_scores(&x, &x, 100.0).unwrap().values.iter().all(|&v| v == 1.0));
    }
}

#[test]
fn kernel_matches_direct_spectral_map_distance() {
    // t_i from Parseval-based row energies equals the direct map-space distance
    let mut rng = rng_from_seed(6);
    let n = 8;
    let a = random_complex(&mut rng, n, Domain::Image);
    let b = random_complex(&mut rng, n, Domain::Image);
    let gamma = 0.3;
    let t = target_scores(&a, &b, gamma).unwrap();
    let ma = akspace_core::kspace::complex_spectral_maps(&a).unwrap();
    let mb = akspace_core::kspace::complex_spectral_maps(&b).unwrap();
    for i in 0..n {
        let d = ma[i].sub(&mb[i]).unwrap().norm_sqr();
        assert!((t.values[i] - (-gamma * d).exp()).abs() < 1e-9);
    }
}

#[test]
fn mse_and_ssim_references() {
    let mut rng = rng_from_seed(7);
    let x = random_grid(&mut rng, 16);
    assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
    let shifted = RealGrid::new(16, 16, x.data().iter().map(|v| v + 0.1).collect()).unwrap();
    let cx = ComplexImage::from_real(&x);
    let cs = ComplexImage::from_real(&shifted);
    assert!((mse(&cs, &cx).unwrap() - 0.01).abs() < 1e-12);
    assert!(ssim(&shifted, &x).unwrap() < 1.0);
}

#[test]
fn correlation_references() {
    let a = [1.0, 2.0, 3.0, 4.0, 5.0];
    let b = [2.0, 4.1, 5.9, 8.2, 9.9];
    assert!(pearson(&a, &b).unwrap() > 0.99);
    let cubic: Vec<f64> = a.iter().map(|v: &f64| v.powi(3)).collect();
    assert!((spearman(&a, &cubic).unwrap() - 1.0).abs() < 1e-12);
    let rev: Vec<f64> = a.iter().rev().copied().collect();
    assert!((spearman(&a, &rev).unwrap() + 1.0).abs() < 1e-12);
    let q = Quartiles::of(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
    assert_eq!((q.min, q.q1, q.median, q.q3, q.max), (1.0, 2.0, 3.0, 4.0, 5.0));
    assert_eq!(q.iqr(), 2.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ssim_is_bounded_and_range_scaled(seed in any::<u64>()) {
        let mut rng = rng_from_seed(seed);
        let x = random_grid(&mut rng, 16);
        let y = random_grid(&mut rng, 16);
        let s = ssim(&y, &x).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        // scaling both images scales the dynamic range with them
        let k = 3.0;
        let xs = RealGrid::new(16, 16, x.data().iter().map(|v| v * k).collect()).unwrap();
        let ys = RealGrid::new(16, 16, y.data().iter().map(|v| v * k).collect()).unwrap();
        prop_assert!((ssim(&ys, &xs).unwrap() - s).abs() < 1e-9);
    }

    #[test]
    fn pearson_is_affine_invariant(v in prop::collection::vec(-10.0f64..10.0, 3..40), a in 0.1f64..5.0, b in -5.0f64..5.0) {
        let w: Vec<f64> = v.iter().enumerate().map(|(i, x)| x + (i as f64).sin()).collect();
        prop_assume!(common::l2(&w) > 0.0);
        if let (Ok(r1), Ok(r2)) = (pearson(&v, &w), pearson(&v.iter().map(|x| a * x + b).collect::<Vec<_>>(), &w)) {
            prop_assert!((r1 - r2).abs() < 1e-9);
            prop_assert!(r1.abs() <= 1.0 + 1e-12);
        }
    }
}

#[test]
fn kernel_threshold_example() {
    // γ · error² == 1 at a single row
    let n = 8;
    let mut re = vec![0.0; n * n];
    re[3 * n] = 1.0; // one k-space coefficient of unit magnitude in row 3
    let k = ComplexImage::new(n, n, re, vec![0.0; n * n], Domain::KSpace).unwrap();
    let r = akspace_core::kspace::idft2(&k).unwrap();
    let x = ComplexImage::zeros(n, Domain::Image).unwrap();
    let t = target_scores(&r, &x, 1.0).unwrap();
    assert!((t.values[3] - (-1.0f64).exp()).abs() < 1e-9);
}

//! Complex images, Cartesian row masks and the Fourier-domain operations built on them.
//!
//! Transforms are unitary with unshifted frequency layout: row 0 is DC and rows near 0
//! and near `N - 1` are the low frequencies. Measurements are whole k-space rows. Real
//! images have conjugate-symmetric spectra, so row `i` and row `(N - i) mod N` carry the
//! same information and are acquired together as a pair; pair `p` for `p` in `0..=N/2`
//! holds rows `p` and `N - p` (rows 0 and `N/2` pair with themselves).

use akspace_autodiff::dft2_planes;

use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Image,
    KSpace,
}

impl Domain {
    fn label(self) -> &'static str {
        match self {
            Domain::Image => "image",
            Domain::KSpace => "k-space",
        }
    }
}

/// Smallest supported grid size.
pub const MIN_SIZE: usize = 4;

fn check_size(height: usize, width: usize) -> Result<usize> {
    if height != width {
        return Err(CoreError::Dimension(format!("non-square grid {height}x{width}")));
    }
    if height % 2 != 0 || height < MIN_SIZE {
        return Err(CoreError::Dimension(format!(
            "grid size {height} must be even and at least {MIN_SIZE}"
        )));
    }
    Ok(height)
}

/// Real-valued square grid, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RealGrid {
    size: usize,
    data: Vec<f64>,
}

impl RealGrid {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        let size = check_size(height, width)?;
        if data.len() != size * size {
            return Err(CoreError::SizeMismatch(format!(
                "{} values for a {size}x{size} grid",
                data.len()
            )));
        }
        Ok(Self { size, data })
    }

    pub fn zeros(size: usize) -> Result<Self> {
        Self::new(size, size, vec![0.0; size * size])
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.size + col]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

/// Square complex grid held as a real plane and an imaginary plane.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexImage {
    size: usize,
    re: Vec<f64>,
    im: Vec<f64>,
    domain: Domain,
}

impl ComplexImage {
    pub fn new(height: usize, width: usize, re: Vec<f64>, im: Vec<f64>, domain: Domain) -> Result<Self> {
        let size = check_size(height, width)?;
        if re.len() != size * size || im.len() != size * size {
            return Err(CoreError::SizeMismatch(format!(
                "planes of {} and {} values for a {size}x{size} grid",
                re.len(),
                im.len()
            )));
        }
        if re.iter().chain(&im).any(|v| !v.is_finite()) {
            return Err(CoreError::Invalid("non-finite value in complex image".into()));
        }
        Ok(Self { size, re, im, domain })
    }

    pub fn zeros(size: usize, domain: Domain) -> Result<Self> {
        Self::new(size, size, vec![0.0; size * size], vec![0.0; size * size], domain)
    }

    /// Embeds a real grid as an image-domain complex image with zero imaginary plane.
    pub fn from_real(grid: &RealGrid) -> Self {
        Self {
            size: grid.size,
            re: grid.data.clone(),
            im: vec![0.0; grid.data.len()],
            domain: Domain::Image,
        }
    }

    /// Builds from interleaved-free planes `[re..., im...]` of length `2 N²`.
    pub fn from_planes(size: usize, planes: &[f64], domain: Domain) -> Result<Self> {
        if planes.len() != 2 * size * size {
            return Err(CoreError::SizeMismatch(format!(
                "{} values for two {size}x{size} planes",
                planes.len()
            )));
        }
        let (re, im) = planes.split_at(size * size);
        Self::new(size, size, re.to_vec(), im.to_vec(), domain)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn re(&self) -> &[f64] {
        &self.re
    }

    pub fn im(&self) -> &[f64] {
        &self.im
    }

    /// Real plane followed by imaginary plane.
    pub fn planes(&self) -> Vec<f64> {
        let mut v = self.re.clone();
        v.extend_from_slice(&self.im);
        v
    }

    pub fn get(&self, row: usize, col: usize) -> (f64, f64) {
        let i = row * self.size + col;
        (self.re[i], self.im[i])
    }

    pub fn real_part(&self) -> RealGrid {
        RealGrid {
            size: self.size,
            data: self.re.clone(),
        }
    }

    pub fn magnitude(&self) -> RealGrid {
        RealGrid {
            size: self.size,
            data: self.re.iter().zip(&self.im).map(|(a, b)| a.hypot(*b)).collect(),
        }
    }

    /// Squared L2 norm, `Σ |z|²`.
    pub fn norm_sqr(&self) -> f64 {
        self.re.iter().chain(&self.im).map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    /// `self - other` keeping `self`'s domain.
    pub fn sub(&self, other: &ComplexImage) -> Result<ComplexImage> {
        self.same_size(other)?;
        Ok(ComplexImage {
            size: self.size,
            re: self.re.iter().zip(&other.re).map(|(a, b)| a - b).collect(),
            im: self.im.iter().zip(&other.im).map(|(a, b)| a - b).collect(),
            domain: self.domain,
        })
    }

    pub(crate) fn same_size(&self, other: &ComplexImage) -> Result<()> {
        if self.size != other.size {
            return Err(CoreError::SizeMismatch(format!(
                "{}x{0} vs {}x{1}",
                self.size, other.size
            )));
        }
        Ok(())
    }

    fn expect_domain(&self, domain: Domain) -> Result<()> {
        if self.domain != domain {
            return Err(CoreError::Domain {
                expected: domain.label(),
                actual: self.domain.label(),
            });
        }
        Ok(())
    }

    fn transformed(&self, inverse: bool, domain: Domain) -> ComplexImage {
        let (mut re, mut im) = (self.re.clone(), self.im.clone());
        dft2_planes(&mut re, &mut im, self.size, self.size, inverse);
        ComplexImage {
            size: self.size,
            re,
            im,
            domain,
        }
    }
}

/// Per-row binary Cartesian sampling mask.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SamplingMask {
    observed: Vec<bool>,
}

impl SamplingMask {
    pub fn empty(n_rows: usize) -> Self {
        Self {
            observed: vec![false; n_rows],
        }
    }

    pub fn full(n_rows: usize) -> Self {
        Self {
            observed: vec![true; n_rows],
        }
    }

    pub fn from_bits(observed: Vec<bool>) -> Self {
        Self { observed }
    }

    pub fn from_rows(n_rows: usize, rows: &[usize]) -> Result<Self> {
        let mut mask = Self::empty(n_rows);
        for &r in rows {
            if r >= n_rows {
                return Err(CoreError::Invalid(format!("row {r} outside 0..{n_rows}")));
            }
            mask.observed[r] = true;
        }
        Ok(mask)
    }

    /// Mask observing exactly the given conjugate pairs.
    pub fn from_pairs(n_rows: usize, pairs: &[usize]) -> Result<Self> {
        let mut mask = Self::empty(n_rows);
        for &p in pairs {
            mask.observe_pair(p)?;
        }
        Ok(mask)
    }

    pub fn n_rows(&self) -> usize {
        self.observed.len()
    }

    pub fn bits(&self) -> &[bool] {
        &self.observed
    }

    pub fn is_observed(&self, row: usize) -> bool {
        self.observed[row]
    }

    pub fn observed_rows(&self) -> Vec<usize> {
        (0..self.n_rows()).filter(|&r| self.observed[r]).collect()
    }

    pub fn observed_count(&self) -> usize {
        self.observed.iter().filter(|&&o| o).count()
    }

    pub fn is_symmetric(&self) -> bool {
        let n = self.n_rows();
        (0..n).all(|i| self.observed[i] == self.observed[(n - i) % n])
    }

    /// Number of conjugate pairs, `N/2 + 1`.
    pub fn pair_count(&self) -> usize {
        self.n_rows() / 2 + 1
    }

    /// Rows of pair `p`; a self-paired row is listed once.
    pub fn pair_rows(&self, pair: usize) -> Vec<usize> {
        let n = self.n_rows();
        let partner = (n - pair) % n;
        if partner == pair {
            vec![pair]
        } else {
            vec![pair, partner]
        }
    }

    pub fn is_pair_observed(&self, pair: usize) -> bool {
        pair < self.pair_count() && self.pair_rows(pair).iter().all(|&r| self.observed[r])
    }

    pub fn observed_pairs(&self) -> Vec<usize> {
        (0..self.pair_count()).filter(|&p| self.is_pair_observed(p)).collect()
    }

    pub fn unobserved_pairs(&self) -> Vec<usize> {
        (0..self.pair_count()).filter(|&p| !self.is_pair_observed(p)).collect()
    }

    pub fn observe_pair(&mut self, pair: usize) -> Result<()> {
        if pair >= self.pair_count() {
            return Err(CoreError::Invalid(format!(
                "pair {pair} outside 0..{}",
                self.pair_count()
            )));
        }
        for r in self.pair_rows(pair) {
            self.observed[r] = true;
        }
        Ok(())
    }

    /// Row indicator as `0.0 / 1.0` values.
    pub fn as_f64(&self) -> Vec<f64> {
        self.observed.iter().map(|&o| if o { 1.0 } else { 0.0 }).collect()
    }
}

/// Unitary forward 2D DFT.
pub fn dft2(img: &ComplexImage) -> Result<ComplexImage> {
    img.expect_domain(Domain::Image)?;
    Ok(img.transformed(false, Domain::KSpace))
}

/// Unitary inverse 2D DFT.
pub fn idft2(kspace: &ComplexImage) -> Result<ComplexImage> {
    kspace.expect_domain(Domain::KSpace)?;
    Ok(kspace.transformed(true, Domain::Image))
}

/// Fully sampled k-space of a real (magnitude) image.
pub fn simulate_kspace(magnitude: &RealGrid) -> ComplexImage {
    ComplexImage::from_real(magnitude).transformed(false, Domain::KSpace)
}

fn check_mask(size: usize, mask: &SamplingMask) -> Result<()> {
    if mask.n_rows() != size {
        return Err(CoreError::SizeMismatch(format!(
            "mask of {} rows for a {size}x{size} grid",
            mask.n_rows()
        )));
    }
    Ok(())
}

/// `S ⊙ y`: keeps observed rows, zeroes the rest.
pub fn apply_mask(y: &ComplexImage, mask: &SamplingMask) -> Result<ComplexImage> {
    y.expect_domain(Domain::KSpace)?;
    check_mask(y.size, mask)?;
    let mut out = y.clone();
    let n = y.size;
    for row in 0..n {
        if !mask.is_observed(row) {
            out.re[row * n..(row + 1) * n].iter_mut().for_each(|v| *v = 0.0);
            out.im[row * n..(row + 1) * n].iter_mut().for_each(|v| *v = 0.0);
        }
    }
    Ok(out)
}

/// Zero-filled reconstruction `F⁻¹(ŷ)`.
pub fn zero_fill(masked: &ComplexImage) -> Result<ComplexImage> {
    idft2(masked)
}

/// Hard data consistency: `F⁻¹((1 - S) ⊙ F(f_out) + S ⊙ F(x̂))`.
pub fn data_consistency(
    f_out: &ComplexImage,
    zero_filled: &ComplexImage,
    mask: &SamplingMask,
) -> Result<ComplexImage> {
    f_out.same_size(zero_filled)?;
    check_mask(f_out.size, mask)?;
    let mut mixed = dft2(f_out)?;
    let measured = dft2(zero_filled)?;
    let n = f_out.size;
    for row in mask.observed_rows() {
        let range = row * n..(row + 1) * n;
        mixed.re[range.clone()].copy_from_slice(&measured.re[range.clone()]);
        mixed.im[range.clone()].copy_from_slice(&measured.im[range]);
    }
    idft2(&mixed)
}

/// How each complex spectral map is reduced to a real channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Magnitude,
}

/// One real map per k-space row.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralMapStack {
    pub maps: Vec<RealGrid>,
    pub reduction: Reduction,
}

/// Complex spectral maps `M(r)⁽ⁱ⁾ = F⁻¹(Ŝ⁽ⁱ⁾ ⊙ F(r))`, one per row; they sum to `r`.
pub fn complex_spectral_maps(r: &ComplexImage) -> Result<Vec<ComplexImage>> {
    let spectrum = dft2(r)?;
    let n = r.size;
    Ok((0..n)
        .map(|row| {
            let mut single = ComplexImage::zeros(n, Domain::KSpace).expect("valid size");
            let range = row * n..(row + 1) * n;
            single.re[range.clone()].copy_from_slice(&spectrum.re[range.clone()]);
            single.im[range.clone()].copy_from_slice(&spectrum.im[range]);
            single.transformed(true, Domain::Image)
        })
        .collect())
}

/// Magnitude spectral maps, the evaluator's N-channel input.
pub fn spectral_decompose(r: &ComplexImage) -> Result<SpectralMapStack> {
    Ok(SpectralMapStack {
        maps: complex_spectral_maps(r)?.iter().map(ComplexImage::magnitude).collect(),
        reduction: Reduction::Magnitude,
    })
}

/// Squared norm of each row of `F(a) - F(b)`; by Parseval this equals
/// `||M(a)⁽ⁱ⁾ - M(b)⁽ⁱ⁾||²` for every row `i`.
pub fn row_error_energy(a: &ComplexImage, b: &ComplexImage) -> Result<Vec<f64>> {
    let diff = dft2(&a.sub(b)?)?;
    let n = a.size;
    Ok((0..n)
        .map(|row| {
            let range = row * n..(row + 1) * n;
            diff.re[range.clone()]
                .iter()
                .chain(&diff.im[range])
                .map(|v| v * v)
                .sum()
        })
        .collect())
}

/// Conjugate partner row, `(N - i) mod N`.
pub fn conjugate_pair(row: usize, n: usize) -> Result<usize> {
    if row >= n {
        return Err(CoreError::Invalid(format!("row {row} outside 0..{n}")));
    }
    Ok((n - row) % n)
}

/// Adds the conjugate partner of every observed row.
pub fn symmetrize_mask(mask: &SamplingMask) -> SamplingMask {
    let n = mask.n_rows();
    SamplingMask {
        observed: (0..n)
            .map(|i| mask.observed[i] || mask.observed[(n - i) % n])
            .collect(),
    }
}

/// Fraction of acquired measurements: observed conjugate pairs over `N/2`, capped at 1.
///
/// There are `N/2 + 1` pairs because rows 0 and `N/2` pair with themselves, so the cap
/// is reached one pair before every row is observed.
pub fn kma(mask: &SamplingMask) -> Result<f64> {
    if !mask.is_symmetric() {
        return Err(CoreError::Contract(
            "kMA requires a conjugate-symmetric mask".into(),
        ));
    }
    let n = mask.n_rows();
    if n < 2 {
        return Err(CoreError::Dimension(format!("mask of {n} rows")));
    }
    let pairs = mask.observed_pairs().len() as f64;
    Ok((pairs / (n / 2) as f64).min(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize, f: impl Fn(usize, usize) -> f64) -> RealGrid {
        RealGrid::new(n, n, (0..n * n).map(|i| f(i / n, i % n)).collect()).unwrap()
    }

    #[test]
    fn rejects_bad_dimensions() {
        assert!(matches!(
            ComplexImage::new(8, 6, vec![0.0; 48], vec![0.0; 48], Domain::Image),
            Err(CoreError::Dimension(_))
        ));
        assert!(matches!(RealGrid::zeros(7), Err(CoreError::Dimension(_))));
        let nan = ComplexImage::new(4, 4, vec![f64::NAN; 16], vec![0.0; 16], Domain::Image);
        assert!(nan.is_err());
    }

    #[test]
    fn zero_image_transforms_to_zero() {
        let z = ComplexImage::zeros(8, Domain::Image).unwrap();
        assert!(dft2(&z).unwrap().norm() == 0.0);
        assert!(simulate_kspace(&RealGrid::zeros(8).unwrap()).norm() == 0.0);
    }

    #[test]
    fn domain_tags_are_enforced() {
        let k = ComplexImage::zeros(8, Domain::KSpace).unwrap();
        assert!(matches!(dft2(&k), Err(CoreError::Domain { .. })));
        let x = ComplexImage::zeros(8, Domain::Image).unwrap();
        assert!(matches!(zero_fill(&x), Err(CoreError::Domain { .. })));
    }

    #[test]
    fn mask_application() {
        let y = simulate_kspace(&grid(8, |i, j| (i * 3 + j) as f64 * 0.1));
        assert_eq!(apply_mask(&y, &SamplingMask::full(8)).unwrap(), y);
        let only0 = SamplingMask::from_rows(8, &[0]).unwrap();
        let m = apply_mask(&y, &only0).unwrap();
        for row in 1..8 {
            assert!((0..8).all(|c| m.get(row, c) == (0.0, 0.0)));
        }
        assert_eq!(&m.re()[..8], &y.re()[..8]);
        assert_eq!(apply_mask(&m, &only0).unwrap(), m);
        assert!(apply_mask(&y, &SamplingMask::full(6)).is_err());
    }

    #[test]
    fn full_mask_zero_fill_recovers_image() {
        let x = grid(16, |i, j| ((i * j) as f64).sin());
        let y = simulate_kspace(&x);
        let back = zero_fill(&apply_mask(&y, &SamplingMask::full(16)).unwrap()).unwrap();
        let err = back.sub(&ComplexImage::from_real(&x)).unwrap().norm();
        assert!(err < 1e-6 * ComplexImage::from_real(&x).norm());
    }

    #[test]
    fn dc_identity_cases() {
        let x = ComplexImage::from_real(&grid(8, |i, j| (i + 2 * j) as f64));
        let f = ComplexImage::from_real(&grid(8, |i, j| ((i * j) as f64).cos()));
        let r = data_consistency(&f, &x, &SamplingMask::full(8)).unwrap();
        assert!(r.sub(&x).unwrap().norm() < 1e-6);
        let r = data_consistency(&f, &x, &SamplingMask::empty(8)).unwrap();
        assert!(r.sub(&f).unwrap().norm() < 1e-6);
    }

    #[test]
    fn conjugate_pairs() {
        assert_eq!(conjugate_pair(1, 128).unwrap(), 127);
        assert_eq!(conjugate_pair(0, 32).unwrap(), 0);
        assert_eq!(conjugate_pair(16, 32).unwrap(), 16);
        assert!(conjugate_pair(32, 32).is_err());
    }

    #[test]
    fn symmetrization() {
        let m = symmetrize_mask(&SamplingMask::from_rows(32, &[3]).unwrap());
        assert_eq!(m.observed_rows(), vec![3, 29]);
        assert_eq!(symmetrize_mask(&m), m);
        let s = SamplingMask::from_rows(32, &[0, 16]).unwrap();
        assert_eq!(symmetrize_mask(&s), s);
    }

    #[test]
    fn kma_counts_pairs() {
        let rows: Vec<usize> = vec![1, 2, 3, 4, 5, 127, 126, 125, 124, 123];
        let m = SamplingMask::from_rows(128, &rows).unwrap();
        assert!((kma(&m).unwrap() - 5.0 / 64.0).abs() < 1e-15);
        assert_eq!(kma(&SamplingMask::full(32)).unwrap(), 1.0);
        assert_eq!(kma(&SamplingMask::empty(32)).unwrap(), 0.0);
        let asym = SamplingMask::from_rows(32, &[3]).unwrap();
        assert!(matches!(kma(&asym), Err(CoreError::Contract(_))));
    }

    #[test]
    fn single_row_spectrum_maps_to_one_channel() {
        let n = 8;
        let mut k = ComplexImage::zeros(n, Domain::KSpace).unwrap();
        for c in 0..n {
            k.re[3 * n + c] = (c as f64 * 0.7).sin();
            k.im[3 * n + c] = (c as f64 * 0.3).cos();
        }
        let r = idft2(&k).unwrap();
        let stack = spectral_decompose(&r).unwrap();
        let mag = r.magnitude();
        for (row, map) in stack.maps.iter().enumerate() {
            if row == 3 {
                for (a, b) in map.data().iter().zip(mag.data()) {
                    assert!((a - b).abs() < 1e-12);
                }
            } else {
                assert!(map.data().iter().all(|v| v.abs() < 1e-12));
            }
        }
    }
}

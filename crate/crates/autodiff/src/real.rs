use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::sync::Arc;

use num_traits::Float;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftNum, FftPlanner};

/// Floating-point element type of the engine: `f32` for training, `f64` for gradient checks.
pub trait Real: Float + FftNum + Default + Debug + Display + Sum + Send + Sync + 'static {
    /// Raw strided GEMM: `c = alpha * a * b + beta * c`.
    ///
    /// # Safety
    /// Pointers and strides must describe valid `m×k`, `k×n` and `m×n` matrices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    /// Cached FFT plan of length `len` for the calling thread.
    fn fft_plan(len: usize, inverse: bool) -> Arc<dyn Fft<Self>>;

    fn of(v: f64) -> Self;
}

macro_rules! impl_real {
    ($t:ty, $gemm:path, $cache:ident) => {
        thread_local! {
            static $cache: RefCell<(FftPlanner<$t>, HashMap<(usize, bool), Arc<dyn Fft<$t>>>)> =
                RefCell::new((FftPlanner::new(), HashMap::new()));
        }

        impl Real for $t {
            unsafe fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: *const Self,
                rsa: isize,
                csa: isize,
                b: *const Self,
                rsb: isize,
                csb: isize,
                beta: Self,
                c: *mut Self,
                rsc: isize,
                csc: isize,
            ) {
                $gemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
            }

            fn fft_plan(len: usize, inverse: bool) -> Arc<dyn Fft<Self>> {
                $cache.with(|cell| {
                    let mut guard = cell.borrow_mut();
                    let (planner, plans) = &mut *guard;
                    plans
                        .entry((len, inverse))
                        .or_insert_with(|| {
                            if inverse {
                                planner.plan_fft_inverse(len)
                            } else {
                                planner.plan_fft_forward(len)
                            }
                        })
                        .clone()
                })
            }

            fn of(v: f64) -> Self {
                v as $t
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm, F32_PLANS);
impl_real!(f64, matrixmultiply::dgemm, F64_PLANS);

/// Row-major `c (m×n) = op(a) · op(b)`, where `op` optionally transposes.
///
/// `a` is stored `m×k` (or `k×m` when `trans_a`), `b` is stored `k×n` (or `n×k` when `trans_b`).
/// With `accumulate` the product is added into `c`.
#[allow(clippy::too_many_arguments)]
pub fn matmul<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    // SAFETY: lengths were checked above and strides describe those dense layouts.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unitary 2D DFT over a `rows×cols` grid held as separate real and imaginary planes.
pub fn dft2_planes<T: Real>(re: &mut [T], im: &mut [T], rows: usize, cols: usize, inverse: bool) {
    assert_eq!(re.len(), rows * cols);
    assert_eq!(im.len(), rows * cols);
    let mut buf: Vec<Complex<T>> = re
        .iter()
        .zip(im.iter())
        .map(|(&r, &i)| Complex::new(r, i))
        .collect();

    T::fft_plan(cols, inverse).process(&mut buf);

    let mut transposed = vec![Complex::new(T::zero(), T::zero()); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            transposed[c * rows + r] = buf[r * cols + c];
        }
    }
    T::fft_plan(rows, inverse).process(&mut transposed);

    let scale = T::one() / T::of(((rows * cols) as f64).sqrt());
    for c in 0..cols {
        for r in 0..rows {
            let v = transposed[c * rows + r];
            re[r * cols + c] = v.re * scale;
            im[r * cols + c] = v.im * scale;
        }
    }
}

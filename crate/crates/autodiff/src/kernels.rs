//! Dense kernels behind the graph ops. Layout is always `[channels, height, width]`.

use crate::real::{matmul, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Zero,
    Reflect,
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

pub fn pad2d<T: Real>(x: &[T], c: usize, h: usize, w: usize, p: usize, mode: Padding) -> Vec<T> {
    if p == 0 {
        return x.to_vec();
    }
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let mut out = vec![T::zero(); c * hp * wp];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * hp * wp..(ch + 1) * hp * wp];
        for i in 0..hp {
            let si = i as isize - p as isize;
            let row = match mode {
                Padding::Zero if si < 0 || si >= h as isize => continue,
                Padding::Zero => si as usize,
                Padding::Reflect => reflect(si, h),
            };
            for j in 0..wp {
                let sj = j as isize - p as isize;
                let col = match mode {
                    Padding::Zero if sj < 0 || sj >= w as isize => continue,
                    Padding::Zero => sj as usize,
                    Padding::Reflect => reflect(sj, w),
                };
                dst[i * wp + j] = src[row * w + col];
            }
        }
    }
    out
}

/// Adjoint of [`pad2d`]: folds a padded gradient back onto the unpadded grid.
pub fn pad2d_adjoint<T: Real>(
    gp: &[T],
    c: usize,
    h: usize,
    w: usize,
    p: usize,
    mode: Padding,
) -> Vec<T> {
    if p == 0 {
        return gp.to_vec();
    }
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let mut out = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let src = &gp[ch * hp * wp..(ch + 1) * hp * wp];
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for i in 0..hp {
            let si = i as isize - p as isize;
            let row = match mode {
                Padding::Zero if si < 0 || si >= h as isize => continue,
                Padding::Zero => si as usize,
                Padding::Reflect => reflect(si, h),
            };
            for j in 0..wp {
                let sj = j as isize - p as isize;
                let col = match mode {
                    Padding::Zero if sj < 0 || sj >= w as isize => continue,
                    Padding::Zero => sj as usize,
                    Padding::Reflect => reflect(sj, w),
                };
                dst[row * w + col] = dst[row * w + col] + src[i * wp + j];
            }
        }
    }
    out
}

/// Gathers `k×k` patches with stride `s` into a `[c*k*k, ho*wo]` matrix.
#[allow(clippy::too_many_arguments)]
pub fn im2col<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let mut cols = vec![T::zero(); c * k * k * ho * wo];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oi in 0..ho {
                    let src_row = &plane[(oi * s + ki) * w..];
                    let out_row = &mut dst[oi * wo..(oi + 1) * wo];
                    if s == 1 {
                        out_row.copy_from_slice(&src_row[kj..kj + wo]);
                    } else {
                        for (oj, v) in out_row.iter_mut().enumerate() {
                            *v = src_row[oj * s + kj];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters (accumulating) columns back onto a `[c, h, w]` grid.
#[allow(clippy::too_many_arguments)]
pub fn col2im<T: Real>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let mut x = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let plane = &mut x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oi in 0..ho {
                    let base = (oi * s + ki) * w + kj;
                    for oj in 0..wo {
                        let idx = base + oj * s;
                        plane[idx] = plane[idx] + src[oi * wo + oj];
                    }
                }
            }
        }
    }
    x
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub padding: Padding,
}

impl ConvGeom {
    pub fn output_size(&self, h: usize) -> Option<usize> {
        let hp = h + 2 * self.pad;
        if self.stride == 0 || hp < self.kernel {
            return None;
        }
        Some((hp - self.kernel) / self.stride + 1)
    }

    pub fn transposed_output_size(&self, h: usize) -> Option<usize> {
        if h == 0 || self.stride == 0 {
            return None;
        }
        ((h - 1) * self.stride + self.kernel).checked_sub(2 * self.pad)
    }
}

pub struct ConvDims {
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
}

pub fn conv2d_forward<T: Real>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    d: &ConvDims,
    g: &ConvGeom,
) -> Vec<T> {
    let k = g.kernel;
    let ho = g.output_size(d.h).expect("validated at build time");
    let wo = g.output_size(d.w).expect("validated at build time");
    let mut out = vec![T::zero(); d.cout * ho * wo];
    let kk = d.cin * k * k;
    if k == 1 && g.stride == 1 && g.pad == 0 {
        matmul(d.cout, kk, ho * wo, weight, false, x, false, &mut out, false);
    } else {
        let xp = pad2d(x, d.cin, d.h, d.w, g.pad, g.padding);
        let cols = im2col(&xp, d.cin, d.h + 2 * g.pad, d.w + 2 * g.pad, k, g.stride, ho, wo);
        matmul(d.cout, kk, ho * wo, weight, false, &cols, false, &mut out, false);
    }
    if let Some(b) = bias {
        for (co, &bv) in b.iter().enumerate() {
            for v in &mut out[co * ho * wo..(co + 1) * ho * wo] {
                *v = *v + bv;
            }
        }
    }
    out
}

/// Returns `(dx, dweight, dbias)` for a convolution given the output cotangent.
pub fn conv2d_backward<T: Real>(
    x: &[T],
    weight: &[T],
    gout: &[T],
    d: &ConvDims,
    g: &ConvGeom,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let k = g.kernel;
    let ho = g.output_size(d.h).expect("validated at build time");
    let wo = g.output_size(d.w).expect("validated at build time");
    let kk = d.cin * k * k;
    let mut dw = vec![T::zero(); d.cout * kk];
    let mut dcols = vec![T::zero(); kk * ho * wo];
    let dx = if k == 1 && g.stride == 1 && g.pad == 0 {
        matmul(d.cout, ho * wo, kk, gout, false, x, true, &mut dw, false);
        matmul(kk, d.cout, ho * wo, weight, true, gout, false, &mut dcols, false);
        dcols
    } else {
        let (hp, wp) = (d.h + 2 * g.pad, d.w + 2 * g.pad);
        let xp = pad2d(x, d.cin, d.h, d.w, g.pad, g.padding);
        let cols = im2col(&xp, d.cin, hp, wp, k, g.stride, ho, wo);
        matmul(d.cout, ho * wo, kk, gout, false, &cols, true, &mut dw, false);
        matmul(kk, d.cout, ho * wo, weight, true, gout, false, &mut dcols, false);
        let dxp = col2im(&dcols, d.cin, hp, wp, k, g.stride, ho, wo);
        pad2d_adjoint(&dxp, d.cin, d.h, d.w, g.pad, g.padding)
    };
    let db = sum_planes(gout, d.cout, ho * wo);
    (dx, dw, db)
}

fn sum_planes<T: Real>(v: &[T], c: usize, plane: usize) -> Vec<T> {
    (0..c)
        .map(|ch| {
            let s: f64 = v[ch * plane..(ch + 1) * plane]
                .iter()
                .map(|x| x.to_f64().unwrap_or(f64::NAN))
                .sum();
            T::of(s)
        })
        .collect()
}

fn crop<T: Real>(full: &[T], c: usize, hf: usize, wf: usize, p: usize) -> Vec<T> {
    let (ho, wo) = (hf - 2 * p, wf - 2 * p);
    let mut out = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for i in 0..ho {
            let start = ch * hf * wf + (i + p) * wf + p;
            out.extend_from_slice(&full[start..start + wo]);
        }
    }
    out
}

/// Transposed convolution; `weight` is laid out `[cin, cout, k, k]` and `pad` crops the output.
pub fn conv_transpose2d_forward<T: Real>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    d: &ConvDims,
    g: &ConvGeom,
) -> Vec<T> {
    let k = g.kernel;
    let (hf, wf) = ((d.h - 1) * g.stride + k, (d.w - 1) * g.stride + k);
    let ckk = d.cout * k * k;
    let mut cols = vec![T::zero(); ckk * d.h * d.w];
    matmul(ckk, d.cin, d.h * d.w, weight, true, x, false, &mut cols, false);
    let full = col2im(&cols, d.cout, hf, wf, k, g.stride, d.h, d.w);
    let mut out = crop(&full, d.cout, hf, wf, g.pad);
    if let Some(b) = bias {
        let plane = (hf - 2 * g.pad) * (wf - 2 * g.pad);
        for (co, &bv) in b.iter().enumerate() {
            for v in &mut out[co * plane..(co + 1) * plane] {
                *v = *v + bv;
            }
        }
    }
    out
}

pub fn conv_transpose2d_backward<T: Real>(
    x: &[T],
    weight: &[T],
    gout: &[T],
    d: &ConvDims,
    g: &ConvGeom,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let k = g.kernel;
    let (hf, wf) = ((d.h - 1) * g.stride + k, (d.w - 1) * g.stride + k);
    let (ho, wo) = (hf - 2 * g.pad, wf - 2 * g.pad);
    let full = pad2d(gout, d.cout, ho, wo, g.pad, Padding::Zero);
    let dcols = im2col(&full, d.cout, hf, wf, k, g.stride, d.h, d.w);
    let ckk = d.cout * k * k;
    let mut dx = vec![T::zero(); d.cin * d.h * d.w];
    matmul(d.cin, ckk, d.h * d.w, weight, false, &dcols, false, &mut dx, false);
    let mut dw = vec![T::zero(); d.cin * ckk];
    matmul(d.cin, d.h * d.w, ckk, x, false, &dcols, true, &mut dw, false);
    let db = sum_planes(gout, d.cout, ho * wo);
    (dx, dw, db)
}

/// Per-channel normalization statistics `(mean, 1/sqrt(var + eps))`, accumulated in f64.
pub fn instance_stats<T: Real>(x: &[T], c: usize, plane: usize, eps: f64) -> Vec<(f64, f64)> {
    (0..c)
        .map(|ch| {
            let v = &x[ch * plane..(ch + 1) * plane];
            let n = plane as f64;
            let mean = v.iter().map(|a| a.to_f64().unwrap_or(f64::NAN)).sum::<f64>() / n;
            let var = v
                .iter()
                .map(|a| {
                    let d = a.to_f64().unwrap_or(f64::NAN) - mean;
                    d * d
                })
                .sum::<f64>()
                / n;
            (mean, 1.0 / (var + eps).sqrt())
        })
        .collect()
}

pub fn instance_norm_forward<T: Real>(x: &[T], c: usize, plane: usize, eps: f64) -> Vec<T> {
    let stats = instance_stats(x, c, plane, eps);
    let mut out = vec![T::zero(); x.len()];
    for (ch, &(mean, inv)) in stats.iter().enumerate() {
        for i in ch * plane..(ch + 1) * plane {
            out[i] = T::of((x[i].to_f64().unwrap_or(f64::NAN) - mean) * inv);
        }
    }
    out
}

pub fn instance_norm_backward<T: Real>(
    x: &[T],
    gout: &[T],
    c: usize,
    plane: usize,
    eps: f64,
) -> Vec<T> {
    let stats = instance_stats(x, c, plane, eps);
    let mut dx = vec![T::zero(); x.len()];
    let n = plane as f64;
    for (ch, &(mean, inv)) in stats.iter().enumerate() {
        let range = ch * plane..(ch + 1) * plane;
        let mut g_mean = 0.0;
        let mut gy_mean = 0.0;
        for i in range.clone() {
            let g = gout[i].to_f64().unwrap_or(f64::NAN);
            let y = (x[i].to_f64().unwrap_or(f64::NAN) - mean) * inv;
            g_mean += g;
            gy_mean += g * y;
        }
        g_mean /= n;
        gy_mean /= n;
        for i in range {
            let g = gout[i].to_f64().unwrap_or(f64::NAN);
            let y = (x[i].to_f64().unwrap_or(f64::NAN) - mean) * inv;
            dx[i] = T::of(inv * (g - g_mean - y * gy_mean));
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_padding_mirrors_without_edge_repeat() {
        let x: Vec<f64> = (0..9).map(|v| v as f64).collect();
        let p = pad2d(&x, 1, 3, 3, 1, Padding::Reflect);
        assert_eq!(&p[0..5], &[4.0, 3.0, 4.0, 5.0, 4.0]);
        assert_eq!(&p[5..10], &[1.0, 0.0, 1.0, 2.0, 1.0]);
    }

    #[test]
    fn transposed_conv_doubles_resolution() {
        let g = ConvGeom { kernel: 4, stride: 2, pad: 1, padding: Padding::Zero };
        assert_eq!(g.transposed_output_size(4), Some(8));
        assert_eq!(g.transposed_output_size(16), Some(32));
        let g = ConvGeom { kernel: 3, stride: 2, pad: 1, padding: Padding::Reflect };
        assert_eq!(g.output_size(32), Some(16));
    }

    #[test]
    fn pad_adjoint_matches_inner_product() {
        let x: Vec<f64> = (0..2 * 4 * 5).map(|v| (v as f64 * 0.37).sin()).collect();
        let gp: Vec<f64> = (0..2 * 6 * 7).map(|v| (v as f64 * 0.11).cos()).collect();
        for mode in [Padding::Zero, Padding::Reflect] {
            let px = pad2d(&x, 2, 4, 5, 1, mode);
            let lhs: f64 = px.iter().zip(&gp).map(|(a, b)| a * b).sum();
            let adj = pad2d_adjoint(&gp, 2, 4, 5, 1, mode);
            let rhs: f64 = x.iter().zip(&adj).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }
}

//! Planar feature maps and the differentiable primitives the graphs are
//! built from. Convolutions use replicate padding so constant inputs give
//! constant outputs.

use crate::image::{axis_taps, AxisTap, ResampleMode};
use crate::net::arch::Activation;

/// `c × h × w` planar activations.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        FeatureMap {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.h * self.w;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn concat(parts: &[&FeatureMap]) -> FeatureMap {
        let (h, w) = (parts[0].h, parts[0].w);
        debug_assert!(parts.iter().all(|p| p.h == h && p.w == w));
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.data.len()).sum());
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        FeatureMap {
            c: parts.iter().map(|p| p.c).sum(),
            h,
            w,
            data,
        }
    }
}

pub(crate) fn conv_out_size(n: usize, kernel: usize, stride: usize) -> usize {
    (n + 2 * (kernel / 2) - kernel) / stride + 1
}

/// Column matrix `[c·k·k] × [ho·wo]` with replicate padding.
pub(crate) fn im2col(x: &FeatureMap, kernel: usize, stride: usize) -> (Vec<f64>, usize, usize) {
    let ho = conv_out_size(x.h, kernel, stride);
    let wo = conv_out_size(x.w, kernel, stride);
    let p = ho * wo;
    let pad = (kernel / 2) as isize;
    let mut cols = vec![0.0; x.c * kernel * kernel * p];
    // Clamped source column for each (kx, ox).
    let xs: Vec<Vec<usize>> = (0..kernel)
        .map(|kx| {
            (0..wo)
                .map(|ox| {
                    ((ox * stride) as isize + kx as isize - pad).clamp(0, x.w as isize - 1) as usize
                })
                .collect()
        })
        .collect();
    for c in 0..x.c {
        let plane = x.plane(c);
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = ((c * kernel + ky) * kernel + kx) * p;
                let xs = &xs[kx];
                for oy in 0..ho {
                    let sy = ((oy * stride) as isize + ky as isize - pad).clamp(0, x.h as isize - 1)
                        as usize;
                    let src = &plane[sy * x.w..(sy + 1) * x.w];
                    let dst = &mut cols[row + oy * wo..row + (oy + 1) * wo];
                    for (d, &sx) in dst.iter_mut().zip(xs) {
                        *d = src[sx];
                    }
                }
            }
        }
    }
    (cols, ho, wo)
}

/// Adjoint of [`im2col`]: scatter-add column gradients into the input.
pub(crate) fn col2im(
    dcols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
) -> FeatureMap {
    let ho = conv_out_size(h, kernel, stride);
    let wo = conv_out_size(w, kernel, stride);
    let p = ho * wo;
    let pad = (kernel / 2) as isize;
    let mut out = FeatureMap::zeros(c, h, w);
    let xs: Vec<Vec<usize>> = (0..kernel)
        .map(|kx| {
            (0..wo)
                .map(|ox| ((ox * stride) as isize + kx as isize - pad).clamp(0, w as isize - 1) as usize)
                .collect()
        })
        .collect();
    for ch in 0..c {
        let plane = &mut out.data[ch * h * w..(ch + 1) * h * w];
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = ((ch * kernel + ky) * kernel + kx) * p;
                let xs = &xs[kx];
                for oy in 0..ho {
                    let sy = ((oy * stride) as isize + ky as isize - pad).clamp(0, h as isize - 1)
                        as usize;
                    let src = &dcols[row + oy * wo..row + (oy + 1) * wo];
                    let dst = &mut plane[sy * w..(sy + 1) * w];
                    for (g, &sx) in src.iter().zip(xs) {
                        dst[sx] += g;
                    }
                }
            }
        }
    }
    out
}

/// `c[m×n] = beta·c + a[m×k]·b[k×n]` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: every index touched is inside the slices given the strides
    // and dimensions passed by the callers in this module.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
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

pub(crate) fn activate(act: Activation, v: &mut [f64]) {
    match act {
        Activation::Relu => v.iter_mut().for_each(|x| *x = x.max(0.0)),
        Activation::Sigmoid => v.iter_mut().for_each(|x| *x = sigmoid(*x)),
        Activation::Identity => {}
    }
}

/// Multiplies `grad` in place by the activation derivative, expressed in
/// terms of the activation output.
pub(crate) fn activation_backward(act: Activation, out: &[f64], grad: &mut [f64]) {
    match act {
        Activation::Relu => grad
            .iter_mut()
            .zip(out)
            .for_each(|(g, &y)| {
                if y <= 0.0 {
                    *g = 0.0
                }
            }),
        Activation::Sigmoid => grad
            .iter_mut()
            .zip(out)
            .for_each(|(g, &y)| *g *= y * (1.0 - y)),
        Activation::Identity => {}
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn upsample2_nearest(x: &FeatureMap) -> FeatureMap {
    let (h2, w2) = (x.h * 2, x.w * 2);
    let mut out = FeatureMap::zeros(x.c, h2, w2);
    for c in 0..x.c {
        let src = x.plane(c);
        let dst = &mut out.data[c * h2 * w2..(c + 1) * h2 * w2];
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[y * w2 + xx] = src[(y / 2) * x.w + xx / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2_nearest_backward(d: &FeatureMap) -> FeatureMap {
    let (h, w) = (d.h / 2, d.w / 2);
    let mut out = FeatureMap::zeros(d.c, h, w);
    for c in 0..d.c {
        let src = d.plane(c);
        let dst = &mut out.data[c * h * w..(c + 1) * h * w];
        for y in 0..d.h {
            for x in 0..d.w {
                dst[(y / 2) * w + x / 2] += src[y * d.w + x];
            }
        }
    }
    out
}

/// Separable bilinear resampler between two fixed plane sizes, with its
/// adjoint for backpropagation.
#[derive(Debug, Clone)]
pub struct BilinearOp {
    pub in_w: usize,
    pub in_h: usize,
    pub out_w: usize,
    pub out_h: usize,
    xt: Vec<AxisTap>,
    yt: Vec<AxisTap>,
}

impl BilinearOp {
    pub fn new(in_w: usize, in_h: usize, out_w: usize, out_h: usize) -> Self {
        BilinearOp {
            in_w,
            in_h,
            out_w,
            out_h,
            xt: axis_taps(in_w, out_w, ResampleMode::Bilinear),
            yt: axis_taps(in_h, out_h, ResampleMode::Bilinear),
        }
    }

    pub fn apply(&self, src: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.out_w * self.out_h);
        for ty in &self.yt {
            let r0 = &src[ty.i0 * self.in_w..(ty.i0 + 1) * self.in_w];
            let r1 = &src[ty.i1 * self.in_w..(ty.i1 + 1) * self.in_w];
            for tx in &self.xt {
                let top = tx.w0 * r0[tx.i0] + tx.w1 * r0[tx.i1];
                let bot = tx.w0 * r1[tx.i0] + tx.w1 * r1[tx.i1];
                out.push(ty.w0 * top + ty.w1 * bot);
            }
        }
        out
    }

    pub fn adjoint(&self, d: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.in_w * self.in_h];
        for (oy, ty) in self.yt.iter().enumerate() {
            for (ox, tx) in self.xt.iter().enumerate() {
                let g = d[oy * self.out_w + ox];
                let (a, b) = (ty.w0 * g, ty.w1 * g);
                out[ty.i0 * self.in_w + tx.i0] += a * tx.w0;
                out[ty.i0 * self.in_w + tx.i1] += a * tx.w1;
                out[ty.i1 * self.in_w + tx.i0] += b * tx.w0;
                out[ty.i1 * self.in_w + tx.i1] += b * tx.w1;
            }
        }
        out
    }

    pub fn apply_map(&self, x: &FeatureMap) -> FeatureMap {
        let mut data = Vec::with_capacity(x.c * self.out_w * self.out_h);
        for c in 0..x.c {
            data.extend(self.apply(x.plane(c)));
        }
        FeatureMap {
            c: x.c,
            h: self.out_h,
            w: self.out_w,
            data,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(c: usize, h: usize, w: usize) -> FeatureMap {
        FeatureMap {
            c,
            h,
            w,
            data: (0..c * h * w).map(|i| ((i * 7919) % 101) as f64 / 101.0 - 0.5).collect(),
        }
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        for stride in [1, 2] {
            let x = ramp(3, 6, 8);
            let (cols, _, _) = im2col(&x, 3, stride);
            let d: Vec<f64> = (0..cols.len()).map(|i| ((i * 31) % 17) as f64 - 8.0).collect();
            let back = col2im(&d, 3, 6, 8, 3, stride);
            assert!((dot(&cols, &d) - dot(&x.data, &back.data)).abs() < 1e-9);
        }
    }

    #[test]
    fn upsample_adjoint() {
        let x = ramp(2, 3, 4);
        let up = upsample2_nearest(&x);
        let d = ramp(2, 6, 8);
        let back = upsample2_nearest_backward(&d);
        assert!((dot(&up.data, &d.data) - dot(&x.data, &back.data)).abs() < 1e-12);
    }

    #[test]
    fn bilinear_adjoint() {
        let op = BilinearOp::new(4, 3, 16, 12);
        let x = ramp(1, 3, 4);
        let d = ramp(1, 12, 16);
        let lhs = dot(&op.apply(&x.data), &d.data);
        let rhs = dot(&x.data, &op.adjoint(&d.data));
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn gemm_matches_naive() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.0, 2.0, 1.0, 0.0, 3.0]; // 3x2
        let mut c = [0.0; 4];
        gemm(2, 3, 2, &a, (3, 1), &b, (2, 1), 0.0, &mut c);
        let mut naive = [0.0; 4];
        for i in 0..2 {
            for j in 0..2 {
                naive[i * 2 + j] = (0..3).map(|t| a[i * 3 + t] * b[t * 2 + j]).sum();
            }
        }
        assert_eq!(c, naive);
        // Transposed view of `a` (3x2 read as its transpose).
        let mut ct = [0.0; 9];
        gemm(3, 2, 3, &a, (1, 3), &a, (3, 1), 0.0, &mut ct);
        assert_eq!(ct[0], 1.0 + 16.0);
        assert_eq!(ct[5], 2.0 * 3.0 + 5.0 * 6.0);
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-1000.0) >= 0.0 && sigmoid(1000.0) <= 1.0);
    }
}

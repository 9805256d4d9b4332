//! Dense kernels shared by tape ops. Row-major storage throughout.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2, ShapeBuilder};

/// `c = beta * c + op(a) @ op(b)` where `op(a)` is `m x k` and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    let a = if trans_a {
        ArrayView2::from_shape((m, k).strides((1, m)), a)
    } else {
        ArrayView2::from_shape((m, k), a)
    }
    .expect("gemm: lhs buffer");
    let b = if trans_b {
        ArrayView2::from_shape((k, n).strides((1, k)), b)
    } else {
        ArrayView2::from_shape((k, n), b)
    }
    .expect("gemm: rhs buffer");
    let mut c = ArrayViewMut2::from_shape((m, n), c).expect("gemm: out buffer");
    general_mat_mul(1.0, &a, &b, beta, &mut c);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn patch(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn positions(&self) -> usize {
        self.ho * self.wo
    }
}

/// Output indices `o < len_out` whose input `o * stride + off - pad` lies in `0..len_in`.
fn valid(len_out: usize, len_in: usize, off: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > off { (pad - off).div_ceil(stride) } else { 0 };
    let hi = if len_in + pad > off {
        ((len_in - 1 + pad - off) / stride + 1).min(len_out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Unfolds `x` (`[n, c, h, w]`) into `[c*k*k, n*ho*wo]`.
#[cfg(test)]
pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut cols = vec![0.0; g.patch() * g.n * g.positions()];
    im2col_into(x, g, &mut cols);
    cols
}

/// Unfolds `x` (`[n, c, h, w]`) into `[c*k*k, n*ho*wo]` in a caller buffer; every entry is overwritten.
pub(crate) fn im2col_into(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let p = g.positions();
    let cols_w = g.n * p;
    for c in 0..g.c {
        for ky in 0..g.k {
            let (y_lo, y_hi) = valid(g.ho, g.h, ky, g.stride, g.pad);
            for kx in 0..g.k {
                let (x_lo, x_hi) = valid(g.wo, g.w, kx, g.stride, g.pad);
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * cols_w..(row + 1) * cols_w];
                for n in 0..g.n {
                    let src = &x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    let out = &mut dst[n * p..(n + 1) * p];
                    for oy in 0..g.ho {
                        let line = &mut out[oy * g.wo..(oy + 1) * g.wo];
                        if oy < y_lo || oy >= y_hi {
                            line.fill(0.0);
                            continue;
                        }
                        let iy = oy * g.stride + ky - g.pad;
                        let src_row = &src[iy * g.w..(iy + 1) * g.w];
                        line[..x_lo].fill(0.0);
                        line[x_hi..].fill(0.0);
                        if g.stride == 1 {
                            let start = x_lo + kx - g.pad;
                            line[x_lo..x_hi].copy_from_slice(&src_row[start..start + x_hi - x_lo]);
                        } else {
                            for ox in x_lo..x_hi {
                                line[ox] = src_row[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: folds `[c*k*k, n*ho*wo]` back into `[n, c, h, w]`, accumulating.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let p = g.positions();
    let cols_w = g.n * p;
    for c in 0..g.c {
        for ky in 0..g.k {
            let (y_lo, y_hi) = valid(g.ho, g.h, ky, g.stride, g.pad);
            for kx in 0..g.k {
                let (x_lo, x_hi) = valid(g.wo, g.w, kx, g.stride, g.pad);
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * cols_w..(row + 1) * cols_w];
                for n in 0..g.n {
                    let dst = &mut dx[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    for oy in y_lo..y_hi {
                        let iy = oy * g.stride + ky - g.pad;
                        let line = &src[n * p + oy * g.wo..n * p + (oy + 1) * g.wo];
                        let out = &mut dst[iy * g.w..(iy + 1) * g.w];
                        for ox in x_lo..x_hi {
                            out[ox * g.stride + kx - g.pad] += line[ox];
                        }
                    }
                }
            }
        }
    }
}

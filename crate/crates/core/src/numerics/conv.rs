//! 2-D convolution kernels (NCHW, im2col + GEMM).
//!
//! The three functions are the partial derivatives of one trilinear form
//! `<g, conv(x, w)>`, so each one's gradient is expressed with the other two.

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn cols_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols_len(&self) -> usize {
        self.ho * self.wo
    }
}

pub fn out_extent(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < k || stride == 0 {
        None
    } else {
        Some((padded - k) / stride + 1)
    }
}

pub fn geometry(
    op: &'static str,
    x_shape: &[usize],
    w_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Result<ConvGeom> {
    if x_shape.len() != 4 || w_shape.len() != 4 || x_shape[1] != w_shape[1] {
        return Err(Error::shape(op, x_shape, w_shape));
    }
    let (kh, kw) = (w_shape[2], w_shape[3]);
    let ho = out_extent(x_shape[2], kh, stride, pad).ok_or_else(|| Error::shape(op, x_shape, w_shape))?;
    let wo = out_extent(x_shape[3], kw, stride, pad).ok_or_else(|| Error::shape(op, x_shape, w_shape))?;
    Ok(ConvGeom {
        n: x_shape[0],
        c: x_shape[1],
        h: x_shape[2],
        w: x_shape[3],
        o: w_shape[0],
        kh,
        kw,
        stride,
        pad,
        ho,
        wo,
    })
}

/// Output columns `[lo, hi)` whose input column `ox * stride + k - pad`
/// falls inside `0..w`.
fn valid_span(g: &ConvGeom, k: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(k).div_ceil(g.stride);
    let hi = if g.w + g.pad > k {
        ((g.w + g.pad - k - 1) / g.stride + 1).min(g.wo)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn im2col<T: Real>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let l = g.cols_len();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * l..(row + 1) * l];
                let (lo, hi) = valid_span(g, kj);
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize || lo == hi {
                        line.fill(T::zero());
                        continue;
                    }
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let start = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    } else {
                        for (v, &s) in line[lo..hi].iter_mut().zip(src[start..].iter().step_by(g.stride)) {
                            *v = s;
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(g: &ConvGeom, cols: &[T], x: &mut [T]) {
    let l = g.cols_len();
    for c in 0..g.c {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * l..(row + 1) * l];
                let (lo, hi) = valid_span(g, kj);
                if lo == hi {
                    continue;
                }
                let start = lo * g.stride + kj - g.pad;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &src[oy * g.wo + lo..oy * g.wo + hi];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (d, &v) in dst[start..].iter_mut().step_by(g.stride).zip(line) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// `y[n,o] = sum_c w[o,c] * x[n,c]` (cross-correlation), zero padding.
pub fn conv2d<T: Real>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
    let g = geometry("conv2d", x.shape(), w.shape(), stride, pad)?;
    let (rows, l) = (g.cols_rows(), g.cols_len());
    let mut cols = vec![T::zero(); rows * l];
    let mut out = vec![T::zero(); g.n * g.o * l];
    let xin = g.c * g.h * g.w;
    for n in 0..g.n {
        im2col(&g, &x.data()[n * xin..(n + 1) * xin], &mut cols);
        let y = &mut out[n * g.o * l..(n + 1) * g.o * l];
        unsafe {
            T::gemm(
                g.o,
                rows,
                l,
                T::one(),
                w.data().as_ptr(),
                rows as isize,
                1,
                cols.as_ptr(),
                l as isize,
                1,
                T::zero(),
                y.as_mut_ptr(),
                l as isize,
                1,
            );
        }
    }
    Ok(Tensor::from_parts(vec![g.n, g.o, g.ho, g.wo], out))
}

/// Gradient of `<g, conv2d(x, w)>` with respect to `x`, i.e. the transposed
/// convolution of `g` by `w` into an `in_hw` sized map.
pub fn conv2d_input_grad<T: Real>(
    gy: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
    in_hw: (usize, usize),
) -> Result<Tensor<T>> {
    let gs = gy.shape();
    let ws = w.shape();
    if gs.len() != 4 || ws.len() != 4 || gs[1] != ws[0] {
        return Err(Error::shape("conv_transpose2d", gs, ws));
    }
    let x_shape = [gs[0], ws[1], in_hw.0, in_hw.1];
    let g = geometry("conv_transpose2d", &x_shape, ws, stride, pad)?;
    if g.ho != gs[2] || g.wo != gs[3] {
        return Err(Error::shape("conv_transpose2d", gs, &x_shape));
    }
    let (rows, l) = (g.cols_rows(), g.cols_len());
    let mut cols = vec![T::zero(); rows * l];
    let xin = g.c * g.h * g.w;
    let mut out = vec![T::zero(); g.n * xin];
    for n in 0..g.n {
        let gn = &gy.data()[n * g.o * l..(n + 1) * g.o * l];
        unsafe {
            // cols = w^T g
            T::gemm(
                rows,
                g.o,
                l,
                T::one(),
                w.data().as_ptr(),
                1,
                rows as isize,
                gn.as_ptr(),
                l as isize,
                1,
                T::zero(),
                cols.as_mut_ptr(),
                l as isize,
                1,
            );
        }
        col2im(&g, &cols, &mut out[n * xin..(n + 1) * xin]);
    }
    Ok(Tensor::from_parts(x_shape.to_vec(), out))
}

/// Gradient of `<g, conv2d(x, w)>` with respect to `w` (kernel `kh x kw`).
pub fn conv2d_weight_grad<T: Real>(
    x: &Tensor<T>,
    gy: &Tensor<T>,
    stride: usize,
    pad: usize,
    k: (usize, usize),
) -> Result<Tensor<T>> {
    let xs = x.shape();
    let gs = gy.shape();
    if xs.len() != 4 || gs.len() != 4 || xs[0] != gs[0] {
        return Err(Error::shape("conv2d_weight_grad", xs, gs));
    }
    let w_shape = [gs[1], xs[1], k.0, k.1];
    let g = geometry("conv2d_weight_grad", xs, &w_shape, stride, pad)?;
    if g.ho != gs[2] || g.wo != gs[3] {
        return Err(Error::shape("conv2d_weight_grad", xs, gs));
    }
    let (rows, l) = (g.cols_rows(), g.cols_len());
    let mut cols = vec![T::zero(); rows * l];
    let mut out = vec![T::zero(); g.o * rows];
    let xin = g.c * g.h * g.w;
    for n in 0..g.n {
        im2col(&g, &x.data()[n * xin..(n + 1) * xin], &mut cols);
        let gn = &gy.data()[n * g.o * l..(n + 1) * g.o * l];
        unsafe {
            // out += g cols^T
            T::gemm(
                g.o,
                l,
                rows,
                T::one(),
                gn.as_ptr(),
                l as isize,
                1,
                cols.as_ptr(),
                1,
                l as isize,
                T::one(),
                out.as_mut_ptr(),
                rows as isize,
                1,
            );
        }
    }
    Ok(Tensor::from_parts(w_shape.to_vec(), out))
}

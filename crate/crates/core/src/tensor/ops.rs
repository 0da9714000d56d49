//! Raw forward/backward kernels over flat row-major buffers.

use super::{gemm, Real};
use crate::error::{Error, Result};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// Lower clip applied to probabilities inside `log`.
pub const LOG_CLIP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad: usize,
}

/// `floor((input + 2 pad - kernel) / stride) + 1`, or an error when the
/// window does not fit.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Config("stride must be positive".into()));
    }
    if kernel == 0 {
        return Err(Error::Config("kernel must be positive".into()));
    }
    let padded = input + 2 * pad;
    if padded < kernel {
        return Err(Error::Config(format!(
            "window {kernel} larger than padded input {padded} (input {input}, pad {pad})"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub h: usize,
    pub w: usize,
    pub filters: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    pub fn out_positions(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfolds `x[B,C,H,W]` into `cols[C·kh·kw, B·Ho·Wo]`.
pub(crate) fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let p = g.out_positions();
    let ncols = g.batch * p;
    let mut cols = vec![T::zero(); g.col_rows() * ncols];
    for c in 0..g.in_ch {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                for b in 0..g.batch {
                    let plane = &x[(b * g.in_ch + c) * g.h * g.w..][..g.h * g.w];
                    let dst = &mut dst_row[b * p..(b + 1) * p];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * g.w..][..g.w];
                        for ox in 0..g.wo {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[oy * g.wo + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto `dx[B,C,H,W]`.
pub(crate) fn col2im<T: Real>(dcols: &[T], g: &ConvGeom) -> Vec<T> {
    let p = g.out_positions();
    let ncols = g.batch * p;
    let mut dx = vec![T::zero(); g.batch * g.in_ch * g.h * g.w];
    for c in 0..g.in_ch {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src_row = &dcols[row * ncols..(row + 1) * ncols];
                for b in 0..g.batch {
                    let plane = &mut dx[(b * g.in_ch + c) * g.h * g.w..][..g.h * g.w];
                    let src = &src_row[b * p..(b + 1) * p];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * g.w..][..g.w];
                        for ox in 0..g.wo {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[ix as usize] += src[oy * g.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Returns `(output[B,F,Ho,Wo], cols)`.
pub(crate) fn conv2d_forward<T: Real>(x: &[T], w: &[T], bias: &[T], g: &ConvGeom) -> (Vec<T>, Vec<T>) {
    let cols = im2col(x, g);
    let p = g.out_positions();
    let ncols = g.batch * p;
    let mut tmp = vec![T::zero(); g.filters * ncols];
    gemm(false, false, g.filters, ncols, g.col_rows(), w, &cols, T::zero(), &mut tmp);
    let mut out = vec![T::zero(); g.batch * g.filters * p];
    for f in 0..g.filters {
        for b in 0..g.batch {
            let src = &tmp[f * ncols + b * p..][..p];
            let dst = &mut out[(b * g.filters + f) * p..][..p];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = *s + bias[f];
            }
        }
    }
    (out, cols)
}

/// Returns `(dx, dw, dbias)`.
pub(crate) fn conv2d_backward<T: Real>(
    dy: &[T],
    cols: &[T],
    w: &[T],
    g: &ConvGeom,
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let p = g.out_positions();
    let ncols = g.batch * p;
    let mut dy_t = vec![T::zero(); g.filters * ncols];
    let mut db = vec![T::zero(); g.filters];
    for b in 0..g.batch {
        for f in 0..g.filters {
            let src = &dy[(b * g.filters + f) * p..][..p];
            dy_t[f * ncols + b * p..][..p].copy_from_slice(src);
            db[f] += src.iter().copied().sum::<T>();
        }
    }
    let ck = g.col_rows();
    let mut dw = vec![T::zero(); g.filters * ck];
    gemm(false, true, g.filters, ck, ncols, &dy_t, cols, T::zero(), &mut dw);
    let dx = need_dx.then(|| {
        let mut dcols = vec![T::zero(); ck * ncols];
        gemm(true, false, ck, ncols, g.filters, w, &dy_t, T::zero(), &mut dcols);
        col2im(&dcols, g)
    });
    (dx, dw, db)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct PoolGeom {
    pub planes: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub ho: usize,
    pub wo: usize,
}

/// Max over each window; ties resolve to the first element in row-major order.
pub(crate) fn maxpool_forward<T: Real>(x: &[T], g: &PoolGeom) -> (Vec<T>, Vec<usize>) {
    let mut out = Vec::with_capacity(g.planes * g.ho * g.wo);
    let mut arg = Vec::with_capacity(out.capacity());
    for pl in 0..g.planes {
        let base = pl * g.h * g.w;
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let mut best_i = base + (oy * g.stride) * g.w + ox * g.stride;
                let mut best = x[best_i];
                for ky in 0..g.k {
                    let row = base + (oy * g.stride + ky) * g.w + ox * g.stride;
                    for kx in 0..g.k {
                        let v = x[row + kx];
                        if v > best {
                            best = v;
                            best_i = row + kx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    (out, arg)
}

pub(crate) fn maxpool_backward<T: Real>(dy: &[T], argmax: &[usize], input_len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); input_len];
    for (g, &i) in dy.iter().zip(argmax) {
        dx[i] += *g;
    }
    dx
}

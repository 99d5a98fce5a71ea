//! Convolution kernels (cross-correlation, no kernel flip) via im2col + GEMM.

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Resolved geometry of a 2-D convolution over one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    /// Validate `input: n x c_in x h x w` against `weight: c_out x c_in x k x k`.
    pub fn new(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 4 || weight.len() != 4 {
            return Err(Error::shape("conv2d", input, weight));
        }
        let (c_in, h, w) = (input[1], input[2], input[3]);
        let (c_out, wc, kh, kw) = (weight[0], weight[1], weight[2], weight[3]);
        if wc != c_in || kh != kw || kh % 2 == 0 || stride == 0 {
            return Err(Error::shape("conv2d", input, weight));
        }
        let k = kh;
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::shape("conv2d", input, weight));
        }
        let h_out = (h + 2 * pad - k) / stride + 1;
        let w_out = (w + 2 * pad - k) / stride + 1;
        Ok(ConvGeom {
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad,
            h_out,
            w_out,
        })
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn out_len(&self) -> usize {
        self.h_out * self.w_out
    }

    /// A 1x1 stride-1 unpadded convolution needs no unfolding.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let hw_out = g.out_len();
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let hw_out = g.out_len();
    for ci in 0..g.c_in {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &src[oy * g.w_out..(oy + 1) * g.w_out];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] = dst[ix as usize] + v;
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x.shape(), weight.shape(), stride, pad)?;
    if let Some(b) = bias {
        if b.shape() != [g.c_out] {
            return Err(Error::shape("conv2d bias", b.shape(), &[g.c_out]));
        }
    }
    let n = x.dim(0);
    let in_len = g.c_in * g.h * g.w;
    let (plen, olen) = (g.patch_len(), g.out_len());
    let mut y = Tensor::zeros(&[n, g.c_out, g.h_out, g.w_out]);
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); plen * olen]
    };
    for s in 0..n {
        let xs = &x.data()[s * in_len..(s + 1) * in_len];
        let b: &[T] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, &g, &mut cols);
            &cols
        };
        let ys = &mut y.data_mut()[s * g.c_out * olen..(s + 1) * g.c_out * olen];
        T::gemm(
            g.c_out,
            plen,
            olen,
            T::one(),
            weight.data(),
            plen as isize,
            1,
            b,
            olen as isize,
            1,
            T::zero(),
            ys,
            olen as isize,
            1,
        );
        if let Some(bias) = bias {
            for (co, &bv) in bias.data().iter().enumerate() {
                for v in &mut ys[co * olen..(co + 1) * olen] {
                    *v = *v + bv;
                }
            }
        }
    }
    Ok(y)
}

/// Gradients of a convolution; `None` slots were not requested.
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
    want: (bool, bool, bool),
) -> ConvGrads<T> {
    let g = ConvGeom::new(x.shape(), weight.shape(), stride, pad)
        .expect("conv2d_backward geometry was validated in forward");
    let n = x.dim(0);
    let in_len = g.c_in * g.h * g.w;
    let (plen, olen) = (g.patch_len(), g.out_len());
    let (want_x, want_w, want_b) = want;

    let mut dx = want_x.then(|| Tensor::zeros(x.shape()));
    let mut dw = want_w.then(|| Tensor::zeros(weight.shape()));
    let mut db = want_b.then(|| Tensor::zeros(&[g.c_out]));

    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { plen * olen }];
    let mut dcols = vec![T::zero(); if want_x { plen * olen } else { 0 }];

    for s in 0..n {
        let dys = &dy.data()[s * g.c_out * olen..(s + 1) * g.c_out * olen];
        if let Some(dw) = dw.as_mut() {
            let xs = &x.data()[s * in_len..(s + 1) * in_len];
            let b: &[T] = if g.is_pointwise() {
                xs
            } else {
                im2col(xs, &g, &mut cols);
                &cols
            };
            // dW += dY_s * cols_s^T
            T::gemm(
                g.c_out,
                olen,
                plen,
                T::one(),
                dys,
                olen as isize,
                1,
                b,
                1,
                olen as isize,
                T::one(),
                dw.data_mut(),
                plen as isize,
                1,
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx.data_mut()[s * in_len..(s + 1) * in_len];
            if g.is_pointwise() {
                T::gemm(
                    plen,
                    g.c_out,
                    olen,
                    T::one(),
                    weight.data(),
                    1,
                    plen as isize,
                    dys,
                    olen as isize,
                    1,
                    T::zero(),
                    dxs,
                    olen as isize,
                    1,
                );
            } else {
                T::gemm(
                    plen,
                    g.c_out,
                    olen,
                    T::one(),
                    weight.data(),
                    1,
                    plen as isize,
                    dys,
                    olen as isize,
                    1,
                    T::zero(),
                    &mut dcols,
                    olen as isize,
                    1,
                );
                col2im(&dcols, &g, dxs);
            }
        }
        if let Some(db) = db.as_mut() {
            for co in 0..g.c_out {
                let s: T = dys[co * olen..(co + 1) * olen].iter().copied().sum();
                db.data_mut()[co] = db.data()[co] + s;
            }
        }
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}

//! Raw slice kernels shared by the value-level and tape-level operations.

use std::borrow::Cow;

use crate::error::{shape_err, Result};

use super::conv_out_extent;

/// Geometry of one 2-D convolution `c_in×in_h×in_w → c_out×out_h×out_w`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub c_in: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn for_conv(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (&[c_in, in_h, in_w], &[c_out, k_in, kh, kw]) = (input, kernel) else {
            return shape_err(format!(
                "conv2d expects a c×H×W input and c_out×c_in×kh×kw kernel, got {input:?} and {kernel:?}"
            ));
        };
        if k_in != c_in {
            return shape_err(format!(
                "conv2d kernel expects {k_in} input channels but the input has {c_in}"
            ));
        }
        if stride == 0 {
            return shape_err("conv2d stride must be at least 1");
        }
        let (Some(out_h), Some(out_w)) = (
            conv_out_extent(in_h, kh, stride, pad),
            conv_out_extent(in_w, kw, stride, pad),
        ) else {
            return shape_err(format!(
                "conv2d kernel {kh}×{kw} does not fit input {in_h}×{in_w} with padding {pad}"
            ));
        };
        Ok(Self { c_in, in_h, in_w, c_out, kh, kw, stride, pad, out_h, out_w })
    }

    /// Geometry of the convolution whose input-gradient a transposed
    /// convolution computes. The transposed input plays the role of the
    /// convolution output.
    pub fn for_transpose(input: &[usize], kernel: &[usize], stride: usize) -> Result<Self> {
        let (&[c, h, w], &[k_c, c_out, kh, kw]) = (input, kernel) else {
            return shape_err(format!(
                "conv_transpose2d expects a c×H×W input and c×c_out×kh×kw kernel, got {input:?} and {kernel:?}"
            ));
        };
        if k_c != c {
            return shape_err(format!(
                "conv_transpose2d kernel expects {k_c} input channels but the input has {c}"
            ));
        }
        if stride == 0 || kh == 0 || kw == 0 || h == 0 || w == 0 {
            return shape_err("conv_transpose2d needs stride ≥ 1 and non-empty extents");
        }
        Ok(Self {
            c_in: c_out,
            in_h: (h - 1) * stride + kh,
            in_w: (w - 1) * stride + kw,
            c_out: c,
            kh,
            kw,
            stride,
            pad: 0,
            out_h: h,
            out_w: w,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unrolls every receptive field into a column: `patch_len × out_h·out_w`.
pub(crate) fn im2col<'a>(input: &'a [f64], g: &ConvGeometry) -> Cow<'a, [f64]> {
    if g.is_pointwise() {
        return Cow::Borrowed(input);
    }
    let out_len = g.out_len();
    let mut cols = vec![0.0; g.patch_len() * out_len];
    for c in 0..g.c_in {
        let plane = &input[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * out_len..(row + 1) * out_len];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    let dst_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    Cow::Owned(cols)
}

/// Scatter-adds columns back onto an input-shaped buffer (adjoint of `im2col`).
pub(crate) fn col2im_add(cols: &[f64], g: &ConvGeometry, out: &mut [f64]) {
    if g.is_pointwise() {
        for (o, c) in out.iter_mut().zip(cols) {
            *o += c;
        }
        return;
    }
    let out_len = g.out_len();
    for c in 0..g.c_in {
        let plane = &mut out[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * out_len..(row + 1) * out_len];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    let src_row = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    for (ox, &s) in src_row.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[ix as usize] += s;
                        }
                    }
                }
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`, row-major.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if n == 0 {
        return;
    }
    for (a_row, c_row) in a.chunks_exact(k.max(1)).zip(c.chunks_exact_mut(n)).take(m) {
        if k == 0 {
            break;
        }
        for (&av, b_row) in a_row.iter().zip(b.chunks_exact(n)) {
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

pub(crate) fn transpose(rows: usize, cols: usize, src: &[f64]) -> Vec<f64> {
    debug_assert_eq!(src.len(), rows * cols);
    let mut out = vec![0.0; src.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

/// Gradient of a convolution with respect to its input, given the output
/// gradient. Also the forward pass of a transposed convolution.
pub(crate) fn conv_input_grad(dout: &[f64], kernel: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let patch = g.patch_len();
    let kt = transpose(g.c_out, patch, kernel);
    let mut cols = vec![0.0; patch * g.out_len()];
    gemm(patch, g.c_out, g.out_len(), &kt, dout, &mut cols);
    let mut dinput = vec![0.0; g.c_in * g.in_h * g.in_w];
    col2im_add(&cols, g, &mut dinput);
    dinput
}

/// Gradient of a convolution with respect to its kernel: `dout · colsᵀ`.
pub(crate) fn conv_kernel_grad(dout: &[f64], cols: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let patch = g.patch_len();
    let cols_t = transpose(patch, g.out_len(), cols);
    let mut dk = vec![0.0; g.c_out * patch];
    gemm(g.c_out, g.out_len(), patch, dout, &cols_t, &mut dk);
    dk
}

//! im2col convolution kernels shared by `conv2d` and `conv2d_transpose`.
//!
//! All routines work on NCHW slices. A batch is lowered into one column
//! matrix of shape `(C·kh·kw, N·OH·OW)` so each pass is a single GEMM.

use serde::{Deserialize, Serialize};

use super::tensor::Scalar;
use crate::error::{Error, Result};

/// Stride, dilation and symmetric zero padding of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn new(stride: usize, dilation: usize, padding: usize) -> Self {
        Self {
            stride,
            dilation,
            padding,
        }
    }

    /// Output extent along one axis, `None` when the dilated kernel does not fit.
    pub fn output_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        let effective = (kernel - 1) * self.dilation + 1;
        let padded = input + 2 * self.padding;
        (effective <= padded).then(|| (padded - effective) / self.stride + 1)
    }
}

impl Default for ConvSpec {
    fn default() -> Self {
        Self::new(1, 1, 0)
    }
}

/// Geometry of a forward convolution `x (N,C,H,W) * w (F,C,kh,kw) -> (N,F,OH,OW)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub spec: ConvSpec,
}

impl ConvGeom {
    pub fn for_conv(
        op: &'static str,
        x: &[usize],
        k: &[usize],
        spec: ConvSpec,
    ) -> Result<Self> {
        check_rank(op, x, k)?;
        check_spec(op, spec)?;
        if k[1] != x[1] {
            return Err(Error::Dimension {
                op,
                axis: 1,
                expected: k[1],
                got: x[1],
            });
        }
        let oh = spec
            .output_extent(x[2], k[2])
            .ok_or_else(|| too_small(op, 2, x[2], k[2], spec))?;
        let ow = spec
            .output_extent(x[3], k[3])
            .ok_or_else(|| too_small(op, 3, x[3], k[3], spec))?;
        Ok(Self {
            n: x[0],
            c: x[1],
            h: x[2],
            w: x[3],
            f: k[0],
            kh: k[2],
            kw: k[3],
            oh,
            ow,
            spec,
        })
    }

    /// Geometry of the convolution whose input-gradient is the transposed
    /// convolution of `x (N,F,H,W)` with `k (F,C,kh,kw)`.
    pub fn for_transpose(
        op: &'static str,
        x: &[usize],
        k: &[usize],
        spec: ConvSpec,
    ) -> Result<Self> {
        check_rank(op, x, k)?;
        check_spec(op, spec)?;
        if k[0] != x[1] {
            return Err(Error::Dimension {
                op,
                axis: 1,
                expected: k[0],
                got: x[1],
            });
        }
        let eff_h = (k[2] - 1) * spec.dilation + 1;
        let eff_w = (k[3] - 1) * spec.dilation + 1;
        let full_h = (x[2] - 1) * spec.stride + eff_h;
        let full_w = (x[3] - 1) * spec.stride + eff_w;
        if full_h <= 2 * spec.padding || full_w <= 2 * spec.padding {
            return Err(Error::shape(
                op,
                format!("padding {} consumes the whole output", spec.padding),
            ));
        }
        Ok(Self {
            n: x[0],
            c: k[1],
            h: full_h - 2 * spec.padding,
            w: full_w - 2 * spec.padding,
            f: k[0],
            kh: k[2],
            kw: k[3],
            oh: x[2],
            ow: x[3],
            spec,
        })
    }

    pub fn input_len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    #[cfg(test)]
    pub fn output_len(&self) -> usize {
        self.n * self.f * self.oh * self.ow
    }

    pub fn kernel_len(&self) -> usize {
        self.f * self.c * self.kh * self.kw
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

fn check_rank(op: &'static str, x: &[usize], k: &[usize]) -> Result<()> {
    if x.len() != 4 {
        return Err(Error::shape(op, format!("input must be NCHW, got shape {x:?}")));
    }
    if k.len() != 4 {
        return Err(Error::shape(op, format!("kernel must be 4-D, got shape {k:?}")));
    }
    Ok(())
}

fn check_spec(op: &'static str, spec: ConvSpec) -> Result<()> {
    if spec.stride == 0 || spec.dilation == 0 {
        return Err(Error::shape(op, "stride and dilation must be at least 1"));
    }
    Ok(())
}

fn too_small(op: &'static str, axis: usize, input: usize, kernel: usize, spec: ConvSpec) -> Error {
    Error::shape(
        op,
        format!(
            "axis {axis}: dilated kernel extent {} exceeds padded input {}",
            (kernel - 1) * spec.dilation + 1,
            input + 2 * spec.padding
        ),
    )
}

impl ConvGeom {
    /// 1×1 kernel, unit stride, no padding: the columns are the input itself.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.spec.stride == 1 && self.spec.padding == 0
    }
}

/// Lowers one sample `(C, H, W)` into columns `(C·kh·kw, OH·OW)`.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let positions = g.positions();
    let s = g.spec;
    cols.fill(T::zero());
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..][..g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut cols[row * positions..][..positions];
                for oy in 0..g.oh {
                    let iy = (oy * s.stride + i * s.dilation) as isize - s.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..][..g.w];
                    let out_row = &mut dst[oy * g.ow..][..g.ow];
                    for (ox, out) in out_row.iter_mut().enumerate() {
                        let ix = (ox * s.stride + j * s.dilation) as isize - s.padding as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            *out = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds one sample's columns back onto its `(C, H, W)` input.
fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let positions = g.positions();
    let s = g.spec;
    for c in 0..g.c {
        let plane = &mut x[c * g.h * g.w..][..g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &cols[row * positions..][..positions];
                for oy in 0..g.oh {
                    let iy = (oy * s.stride + i * s.dilation) as isize - s.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.w..][..g.w];
                    let in_row = &src[oy * g.ow..][..g.ow];
                    for (ox, &v) in in_row.iter().enumerate() {
                        let ix = (ox * s.stride + j * s.dilation) as isize - s.padding as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst_row[ix as usize] = dst_row[ix as usize] + v;
                        }
                    }
                }
            }
        }
    }
}

/// Stride-1 convolutions with few output channels skip the column matrix
/// and accumulate shifted rows directly.
fn use_direct(g: &ConvGeom) -> bool {
    g.spec.stride == 1 && g.f <= 4 && g.ow >= 16 && !g.is_pointwise()
}

/// Visits every `(kernel tap, output row)` pair of a stride-1 convolution as
/// `(f, c, i, j, oy, iy, output column range, input column offset)`.
fn for_each_row(g: &ConvGeom, mut visit: impl FnMut(usize, usize, usize, usize, usize, usize, std::ops::Range<usize>, usize)) {
    let (d, p) = (g.spec.dilation as isize, g.spec.padding as isize);
    for f in 0..g.f {
        for c in 0..g.c {
            for i in 0..g.kh {
                for j in 0..g.kw {
                    let shift = j as isize * d - p;
                    let lo = (-shift).max(0) as usize;
                    let hi = (g.w as isize - shift).min(g.ow as isize);
                    if hi <= lo as isize {
                        continue;
                    }
                    let range = lo..hi as usize;
                    for oy in 0..g.oh {
                        let iy = oy as isize + i as isize * d - p;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let ix0 = (lo as isize + shift) as usize;
                        visit(f, c, i, j, oy, iy as usize, range.clone(), ix0);
                    }
                }
            }
        }
    }
}

fn direct_forward<T: Scalar>(x: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let mut y = vec![T::zero(); g.n * g.f * g.positions()];
    for n in 0..g.n {
        for_each_row(g, |f, c, i, j, oy, iy, range, ix0| {
            let wv = w[((f * g.c + c) * g.kh + i) * g.kw + j];
            let len = range.len();
            let src = &x[((n * g.c + c) * g.h + iy) * g.w + ix0..][..len];
            let dst = &mut y[((n * g.f + f) * g.oh + oy) * g.ow + range.start..][..len];
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = *o + wv * v;
            }
        });
    }
    y
}

fn direct_input_grad<T: Scalar>(dy: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let mut dx = vec![T::zero(); g.input_len()];
    for n in 0..g.n {
        for_each_row(g, |f, c, i, j, oy, iy, range, ix0| {
            let wv = w[((f * g.c + c) * g.kh + i) * g.kw + j];
            let len = range.len();
            let src = &dy[((n * g.f + f) * g.oh + oy) * g.ow + range.start..][..len];
            let dst = &mut dx[((n * g.c + c) * g.h + iy) * g.w + ix0..][..len];
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = *o + wv * v;
            }
        });
    }
    dx
}

fn direct_weight_grad<T: Scalar>(x: &[T], dy: &[T], g: &ConvGeom) -> Vec<T> {
    let mut dw = vec![T::zero(); g.kernel_len()];
    for n in 0..g.n {
        for_each_row(g, |f, c, i, j, oy, iy, range, ix0| {
            let len = range.len();
            let a = &dy[((n * g.f + f) * g.oh + oy) * g.ow + range.start..][..len];
            let b = &x[((n * g.c + c) * g.h + iy) * g.w + ix0..][..len];
            let k = ((f * g.c + c) * g.kh + i) * g.kw + j;
            dw[k] = dw[k] + a.iter().zip(b).map(|(&u, &v)| u * v).sum::<T>();
        });
    }
    dw
}

/// Samples are lowered one at a time so the column buffer stays cache-sized.
pub(crate) fn conv_forward<T: Scalar>(x: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    if use_direct(g) {
        return direct_forward(x, w, g);
    }
    let (p, in_len) = (g.positions(), g.c * g.h * g.w);
    let mut y = vec![T::zero(); g.n * g.f * p];
    let mut buf = vec![T::zero(); if g.is_pointwise() { 0 } else { g.patch() * p }];
    for n in 0..g.n {
        let xn = &x[n * in_len..][..in_len];
        let cols = if g.is_pointwise() {
            xn
        } else {
            im2col(xn, g, &mut buf);
            &buf
        };
        let yn = &mut y[n * g.f * p..][..g.f * p];
        T::gemm(g.f, g.patch(), p, w, false, cols, false, yn, T::zero());
    }
    y
}

/// Gradient w.r.t. the input; also the forward pass of the transposed convolution.
pub(crate) fn conv_input_grad<T: Scalar>(dy: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    if use_direct(g) {
        return direct_input_grad(dy, w, g);
    }
    let (p, in_len) = (g.positions(), g.c * g.h * g.w);
    let mut dx = vec![T::zero(); g.input_len()];
    let mut dcols = vec![T::zero(); if g.is_pointwise() { 0 } else { g.patch() * p }];
    for n in 0..g.n {
        let dyn_ = &dy[n * g.f * p..][..g.f * p];
        let dxn = &mut dx[n * in_len..][..in_len];
        if g.is_pointwise() {
            T::gemm(g.patch(), g.f, p, w, true, dyn_, false, dxn, T::zero());
        } else {
            T::gemm(g.patch(), g.f, p, w, true, dyn_, false, &mut dcols, T::zero());
            col2im(&dcols, g, dxn);
        }
    }
    dx
}

pub(crate) fn conv_weight_grad<T: Scalar>(x: &[T], dy: &[T], g: &ConvGeom) -> Vec<T> {
    if use_direct(g) {
        return direct_weight_grad(x, dy, g);
    }
    let (p, in_len) = (g.positions(), g.c * g.h * g.w);
    let mut dw = vec![T::zero(); g.kernel_len()];
    let mut buf = vec![T::zero(); if g.is_pointwise() { 0 } else { g.patch() * p }];
    for n in 0..g.n {
        let xn = &x[n * in_len..][..in_len];
        let cols = if g.is_pointwise() {
            xn
        } else {
            im2col(xn, g, &mut buf);
            &buf
        };
        let dyn_ = &dy[n * g.f * p..][..g.f * p];
        T::gemm(g.f, p, g.patch(), dyn_, false, cols, true, &mut dw, T::one());
    }
    dw
}

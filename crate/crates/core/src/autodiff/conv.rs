//! im2col / col2im lowering used by the convolution operators.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2dParams {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Conv2dParams {
    pub const fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        Self {
            stride,
            padding,
            dilation,
        }
    }
}

impl Default for Conv2dParams {
    fn default() -> Self {
        Self::new(1, 0, 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvTranspose2dParams {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub output_padding: usize,
}

impl ConvTranspose2dParams {
    pub const fn new(stride: usize, padding: usize, dilation: usize, output_padding: usize) -> Self {
        Self {
            stride,
            padding,
            dilation,
            output_padding,
        }
    }

    /// `(in - 1) * stride - 2 * padding + dilation * (k - 1) + output_padding + 1`
    pub fn output_size(&self, input: usize, kernel: usize) -> Option<usize> {
        let grow = (input - 1) * self.stride + self.dilation * (kernel - 1) + self.output_padding + 1;
        grow.checked_sub(2 * self.padding).filter(|&s| s >= 1)
    }
}

/// Output extent of a cross-correlation along one axis.
pub fn conv_output_size(input: usize, kernel: usize, p: Conv2dParams) -> Option<usize> {
    let span = p.dilation * (kernel - 1) + 1;
    let padded = input + 2 * p.padding;
    if p.stride == 0 || padded < span {
        return None;
    }
    Some((padded - span) / p.stride + 1)
}

/// Geometry of one convolution window sweep over a `c x h x w` image.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Geometry {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub p: Conv2dParams,
    pub oh: usize,
    pub ow: usize,
}

impl Geometry {
    pub fn new(c: usize, h: usize, w: usize, kh: usize, kw: usize, p: Conv2dParams) -> Result<Self> {
        if p.stride == 0 || p.dilation == 0 {
            return Err(Error::shape("stride and dilation must be positive"));
        }
        let oh = conv_output_size(h, kh, p);
        let ow = conv_output_size(w, kw, p);
        match (oh, ow) {
            (Some(oh), Some(ow)) => Ok(Self {
                c,
                h,
                w,
                kh,
                kw,
                p,
                oh,
                ow,
            }),
            _ => Err(Error::shape(format!(
                "kernel {kh}x{kw} with {p:?} does not fit a {h}x{w} input"
            ))),
        }
    }

    pub fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    /// True when the column matrix is the image itself.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.p.stride == 1 && self.p.padding == 0
    }

    /// Range of output columns whose input column `ow * s - pad + off` is in bounds.
    fn valid_cols(&self, off: usize) -> (usize, usize) {
        let s = self.p.stride;
        let pad = self.p.padding;
        // ow * s + off >= pad  and  ow * s + off < w + pad
        let lo = if off >= pad { 0 } else { (pad - off).div_ceil(s) };
        let hi = if self.w + pad > off {
            ((self.w + pad - off - 1) / s + 1).min(self.ow)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

/// Lower `x` (`c x h x w`) into a `(c*kh*kw) x (oh*ow)` column matrix.
pub(crate) fn im2col<T: Scalar>(x: &[T], g: &Geometry, cols: &mut [T]) {
    let plane = g.oh * g.ow;
    let s = g.p.stride;
    let pad = g.p.padding as isize;
    let d = g.p.dilation;
    let mut row = 0;
    for c in 0..g.c {
        let img = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let (lo, hi) = g.valid_cols(kj * d);
                for oh in 0..g.oh {
                    let out = &mut dst[oh * g.ow..(oh + 1) * g.ow];
                    let ih = (oh * s + ki * d) as isize - pad;
                    if ih < 0 || ih >= g.h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &img[ih as usize * g.w..(ih as usize + 1) * g.w];
                    out[..lo].fill(T::zero());
                    out[hi..].fill(T::zero());
                    let base = (kj * d) as isize - pad;
                    if s == 1 {
                        let start = (lo as isize + base) as usize;
                        out[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                    } else {
                        for ow in lo..hi {
                            out[ow] = src[((ow * s) as isize + base) as usize];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-add a column matrix back onto a `c x h x w` image (adjoint of [`im2col`]).
pub(crate) fn col2im<T: Scalar>(cols: &[T], g: &Geometry, x: &mut [T]) {
    let plane = g.oh * g.ow;
    let s = g.p.stride;
    let pad = g.p.padding as isize;
    let d = g.p.dilation;
    let mut row = 0;
    for c in 0..g.c {
        let img = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let src = &cols[row * plane..(row + 1) * plane];
                let (lo, hi) = g.valid_cols(kj * d);
                for oh in 0..g.oh {
                    let ih = (oh * s + ki * d) as isize - pad;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let dst = &mut img[ih as usize * g.w..(ih as usize + 1) * g.w];
                    let line = &src[oh * g.ow..(oh + 1) * g.ow];
                    let base = (kj * d) as isize - pad;
                    if s == 1 {
                        let start = (lo as isize + base) as usize;
                        for (o, &v) in dst[start..start + (hi - lo)].iter_mut().zip(&line[lo..hi]) {
                            *o += v;
                        }
                    } else {
                        for ow in lo..hi {
                            dst[((ow * s) as isize + base) as usize] += line[ow];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

use super::conv::{same_padding, Region};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Shapes of a 'same'-padded average pool. Padding cells count as zeros,
/// so every output is its window sum divided by `window²`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub channels: usize,
    pub window: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl PoolGeometry {
    pub fn new(input_shape: &[usize], window: usize, stride: usize) -> Result<Self> {
        let &[in_h, in_w, channels] = input_shape else {
            return Err(Error::invalid(format!(
                "avg_pool expects a rank-3 input, got {input_shape:?}"
            )));
        };
        if window == 0 || stride == 0 {
            return Err(Error::invalid("pool window and stride must be at least 1"));
        }
        let (out_h, pad_top) = same_padding(in_h, window, stride);
        let (out_w, pad_left) = same_padding(in_w, window, stride);
        Ok(PoolGeometry {
            in_h,
            in_w,
            channels,
            window,
            stride,
            out_h,
            out_w,
            pad_top,
            pad_left,
        })
    }

    pub fn output_shape(&self) -> [usize; 3] {
        [self.out_h, self.out_w, self.channels]
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.in_h, self.in_w, self.channels]
    }

    fn span(&self, o: usize, pad: usize, limit: usize) -> std::ops::Range<usize> {
        let start = (o * self.stride).saturating_sub(pad);
        let end = (o * self.stride + self.window).saturating_sub(pad).min(limit);
        start..end.max(start)
    }

    pub fn input_region(&self, out: &Region) -> Region {
        let rows_lo = self.span(out.row_start, self.pad_top, self.in_h).start;
        let rows_hi = self.span(out.row_end - 1, self.pad_top, self.in_h).end;
        let cols_lo = self.span(out.col_start, self.pad_left, self.in_w).start;
        let cols_hi = self.span(out.col_end - 1, self.pad_left, self.in_w).end;
        Region {
            row_start: rows_lo,
            row_end: rows_hi.max(rows_lo),
            col_start: cols_lo,
            col_end: cols_hi.max(cols_lo),
        }
    }
}

pub fn avg_pool<T: Scalar>(input: &Tensor<T>, window: usize, stride: usize) -> Result<Tensor<T>> {
    let g = PoolGeometry::new(input.shape(), window, stride)?;
    let mut out = Tensor::zeros(&g.output_shape());
    let inv = T::one() / T::of((window * window) as f64);
    let c = g.channels;
    let src = input.data();
    let dst = out.data_mut();
    for oy in 0..g.out_h {
        let rows = g.span(oy, g.pad_top, g.in_h);
        for ox in 0..g.out_w {
            let cols = g.span(ox, g.pad_left, g.in_w);
            let o = (oy * g.out_w + ox) * c;
            for y in rows.clone() {
                for x in cols.clone() {
                    let i = (y * g.in_w + x) * c;
                    for ch in 0..c {
                        dst[o + ch] += src[i + ch];
                    }
                }
            }
            for v in &mut dst[o..o + c] {
                *v *= inv;
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`avg_pool`]: spreads each output gradient evenly over its window.
pub fn avg_pool_adjoint<T: Scalar>(
    grad_out: &Tensor<T>,
    g: &PoolGeometry,
    region: Option<Region>,
) -> Result<(Tensor<T>, Region)> {
    if grad_out.shape() != g.output_shape() {
        return Err(Error::shape("avg_pool_adjoint", grad_out.shape(), &g.output_shape()));
    }
    let region = region.unwrap_or(Region::full(g.out_h, g.out_w));
    let mut grad_in = Tensor::zeros(&g.input_shape());
    let inv = T::one() / T::of((g.window * g.window) as f64);
    let c = g.channels;
    let src = grad_out.data();
    let dst = grad_in.data_mut();
    for oy in region.row_start..region.row_end {
        let rows = g.span(oy, g.pad_top, g.in_h);
        for ox in region.col_start..region.col_end {
            let cols = g.span(ox, g.pad_left, g.in_w);
            let o = (oy * g.out_w + ox) * c;
            for y in rows.clone() {
                for x in cols.clone() {
                    let i = (y * g.in_w + x) * c;
                    for ch in 0..c {
                        dst[i + ch] += src[o + ch] * inv;
                    }
                }
            }
        }
    }
    Ok((grad_in, g.input_region(&region)))
}

/// Per-channel spatial mean of an `H×W×C` tensor.
pub fn global_pool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, c) = input.dims3()?;
    let mut out = Tensor::zeros(&[c]);
    for px in input.data().chunks_exact(c) {
        for (o, &v) in out.data_mut().iter_mut().zip(px) {
            *o += v;
        }
    }
    out.scale_in_place(T::one() / T::of((h * w) as f64));
    Ok(out)
}

pub fn global_pool_adjoint<T: Scalar>(grad: &Tensor<T>, input_shape: &[usize]) -> Result<Tensor<T>> {
    let &[h, w, c] = input_shape else {
        return Err(Error::invalid("global_pool_adjoint needs a rank-3 input shape"));
    };
    if grad.len() != c {
        return Err(Error::shape("global_pool_adjoint", grad.shape(), input_shape));
    }
    let inv = T::one() / T::of((h * w) as f64);
    let scaled: Vec<T> = grad.data().iter().map(|&g| g * inv).collect();
    let mut out = Tensor::zeros(input_shape);
    for px in out.data_mut().chunks_exact_mut(c) {
        px.copy_from_slice(&scaled);
    }
    Ok(out)
}

/// Residual shortcut: window-1 average pool with `stride`, then zero channels
/// appended up to `out_channels`. Identity when both are trivial.
pub fn shortcut_forward<T: Scalar>(
    input: &Tensor<T>,
    stride: usize,
    out_channels: usize,
) -> Result<Tensor<T>> {
    let (h, w, c) = input.dims3()?;
    if out_channels < c || stride == 0 {
        return Err(Error::invalid(format!(
            "shortcut cannot map {c} channels to {out_channels} with stride {stride}"
        )));
    }
    let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
    let mut out = Tensor::zeros(&[oh, ow, out_channels]);
    for oy in 0..oh {
        for ox in 0..ow {
            let src = ((oy * stride) * w + ox * stride) * c;
            let dst = (oy * ow + ox) * out_channels;
            out.data_mut()[dst..dst + c].copy_from_slice(&input.data()[src..src + c]);
        }
    }
    Ok(out)
}

pub fn shortcut_adjoint<T: Scalar>(
    grad: &Tensor<T>,
    input_shape: &[usize],
    stride: usize,
    region: Option<Region>,
) -> Result<(Tensor<T>, Region)> {
    let &[h, w, c] = input_shape else {
        return Err(Error::invalid("shortcut_adjoint needs a rank-3 input shape"));
    };
    let (oh, ow, out_channels) = grad.dims3()?;
    if oh != h.div_ceil(stride) || ow != w.div_ceil(stride) || out_channels < c {
        return Err(Error::shape("shortcut_adjoint", grad.shape(), input_shape));
    }
    let region = region.unwrap_or(Region::full(oh, ow));
    let mut out = Tensor::zeros(input_shape);
    for oy in region.row_start..region.row_end {
        for ox in region.col_start..region.col_end {
            let src = (oy * ow + ox) * out_channels;
            let dst = ((oy * stride) * w + ox * stride) * c;
            out.data_mut()[dst..dst + c].copy_from_slice(&grad.data()[src..src + c]);
        }
    }
    let in_region = Region {
        row_start: region.row_start * stride,
        row_end: ((region.row_end - 1) * stride + 1).min(h),
        col_start: region.col_start * stride,
        col_end: ((region.col_end - 1) * stride + 1).min(w),
    };
    Ok((out, in_region))
}

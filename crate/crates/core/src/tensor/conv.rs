//! 2-D convolution with 'same' zero padding, lowered to GEMM through im2col,
//! plus its adjoints with respect to the input and the kernel.
//!
//! Asymmetric padding puts the smaller half on the top/left side.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Rectangular window `[row_start, row_end) × [col_start, col_end)` over the
/// spatial grid of a feature map. Everything outside is known to be zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Region {
    pub row_start: usize,
    pub row_end: usize,
    pub col_start: usize,
    pub col_end: usize,
}

impl Region {
    pub fn full(h: usize, w: usize) -> Self {
        Region {
            row_start: 0,
            row_end: h,
            col_start: 0,
            col_end: w,
        }
    }

    pub fn single(y: usize, x: usize) -> Self {
        Region {
            row_start: y,
            row_end: y + 1,
            col_start: x,
            col_end: x + 1,
        }
    }

    pub fn rows(&self) -> usize {
        self.row_end - self.row_start
    }

    pub fn cols(&self) -> usize {
        self.col_end - self.col_start
    }

    pub fn area(&self) -> usize {
        self.rows() * self.cols()
    }

    pub fn union(&self, other: &Region) -> Region {
        Region {
            row_start: self.row_start.min(other.row_start),
            row_end: self.row_end.max(other.row_end),
            col_start: self.col_start.min(other.col_start),
            col_end: self.col_end.max(other.col_end),
        }
    }
}

pub(crate) fn same_padding(input: usize, window: usize, stride: usize) -> (usize, usize) {
    let out = input.div_ceil(stride);
    let needed = ((out - 1) * stride + window).saturating_sub(input);
    (out, needed / 2)
}

/// Resolved shapes and padding of one 'same' convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub out_c: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeometry {
    pub fn new(input_shape: &[usize], kernel_shape: &[usize], stride: usize) -> Result<Self> {
        let (&[in_h, in_w, in_c], &[kernel_h, kernel_w, k_in, out_c]) = (input_shape, kernel_shape)
        else {
            return Err(Error::shape("conv2d", input_shape, kernel_shape));
        };
        if k_in != in_c {
            return Err(Error::shape("conv2d", input_shape, kernel_shape));
        }
        if stride == 0 {
            return Err(Error::invalid("convolution stride must be at least 1"));
        }
        let (out_h, pad_top) = same_padding(in_h, kernel_h, stride);
        let (out_w, pad_left) = same_padding(in_w, kernel_w, stride);
        Ok(ConvGeometry {
            in_h,
            in_w,
            in_c,
            kernel_h,
            kernel_w,
            out_c,
            stride,
            out_h,
            out_w,
            pad_top,
            pad_left,
        })
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.in_h, self.in_w, self.in_c]
    }

    pub fn output_shape(&self) -> [usize; 3] {
        [self.out_h, self.out_w, self.out_c]
    }

    pub fn kernel_shape(&self) -> [usize; 4] {
        [self.kernel_h, self.kernel_w, self.in_c, self.out_c]
    }

    /// Length of one im2col row.
    pub fn patch_len(&self) -> usize {
        self.kernel_h * self.kernel_w * self.in_c
    }

    /// Input position touched by kernel tap `(dy, dx)` of output `(oy, ox)`,
    /// or `None` when it falls into the zero padding.
    #[inline]
    pub fn tap(&self, oy: usize, ox: usize, dy: usize, dx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + dy).checked_sub(self.pad_top)?;
        let x = (ox * self.stride + dx).checked_sub(self.pad_left)?;
        (y < self.in_h && x < self.in_w).then_some((y, x))
    }

    /// Input rows/cols that outputs inside `out` can read from.
    pub fn input_region(&self, out: &Region) -> Region {
        let lo = |o: usize, pad: usize| (o * self.stride).saturating_sub(pad);
        let hi = |o_end: usize, pad: usize, k: usize, limit: usize| {
            ((o_end - 1) * self.stride + k).saturating_sub(pad).min(limit)
        };
        Region {
            row_start: lo(out.row_start, self.pad_top),
            row_end: hi(out.row_end, self.pad_top, self.kernel_h, self.in_h),
            col_start: lo(out.col_start, self.pad_left),
            col_end: hi(out.col_end, self.pad_left, self.kernel_w, self.in_w),
        }
    }

    fn check_input(&self, input: &Tensor<impl Scalar>) -> Result<()> {
        if input.shape() != self.input_shape() {
            return Err(Error::shape("conv2d", input.shape(), &self.input_shape()));
        }
        Ok(())
    }

    /// Gathers receptive fields of the outputs in `out` into a row-major
    /// `out.area() × patch_len` matrix.
    fn im2col<T: Scalar>(&self, input: &[T], out: &Region, cols: &mut Vec<T>) {
        let patch = self.patch_len();
        cols.clear();
        cols.resize(out.area() * patch, T::zero());
        let c = self.in_c;
        for (row_idx, oy) in (out.row_start..out.row_end).enumerate() {
            for (col_idx, ox) in (out.col_start..out.col_end).enumerate() {
                let base = (row_idx * out.cols() + col_idx) * patch;
                for dy in 0..self.kernel_h {
                    for dx in 0..self.kernel_w {
                        if let Some((y, x)) = self.tap(oy, ox, dy, dx) {
                            let src = (y * self.in_w + x) * c;
                            let dst = base + (dy * self.kernel_w + dx) * c;
                            cols[dst..dst + c].copy_from_slice(&input[src..src + c]);
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds an im2col matrix back onto the input grid.
    fn col2im<T: Scalar>(&self, cols: &[T], out: &Region, input: &mut [T]) {
        let patch = self.patch_len();
        let c = self.in_c;
        for (row_idx, oy) in (out.row_start..out.row_end).enumerate() {
            for (col_idx, ox) in (out.col_start..out.col_end).enumerate() {
                let base = (row_idx * out.cols() + col_idx) * patch;
                for dy in 0..self.kernel_h {
                    for dx in 0..self.kernel_w {
                        if let Some((y, x)) = self.tap(oy, ox, dy, dx) {
                            let dst = (y * self.in_w + x) * c;
                            let src = base + (dy * self.kernel_w + dx) * c;
                            for (d, &s) in input[dst..dst + c].iter_mut().zip(&cols[src..src + c]) {
                                *d += s;
                            }
                        }
                    }
                }
            }
        }
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1
    }
}

/// 'same'-padded 2-D convolution of an `H×W×Cin` input with an
/// `r1×r2×Cin×Cout` kernel.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, kernel: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
    let geom = ConvGeometry::new(input.shape(), kernel.shape(), stride)?;
    let mut out = Tensor::zeros(&geom.output_shape());
    let positions = geom.out_h * geom.out_w;
    let patch = geom.patch_len();
    let mut cols = Vec::new();
    let lhs: &[T] = if geom.is_pointwise() {
        input.data()
    } else {
        geom.im2col(input.data(), &Region::full(geom.out_h, geom.out_w), &mut cols);
        &cols
    };
    T::gemm(
        positions,
        patch,
        geom.out_c,
        T::one(),
        lhs,
        (patch as isize, 1),
        kernel.data(),
        (geom.out_c as isize, 1),
        T::zero(),
        out.data_mut(),
        (geom.out_c as isize, 1),
    );
    Ok(out)
}

/// Adjoint of [`conv2d`] with respect to its input (the transposed
/// convolution). Only outputs inside `region` are read; the returned region
/// bounds the nonzero support of the result.
pub fn conv2d_input_adjoint<T: Scalar>(
    grad_out: &Tensor<T>,
    kernel: &Tensor<T>,
    geom: &ConvGeometry,
    region: Option<Region>,
) -> Result<(Tensor<T>, Region)> {
    if grad_out.shape() != geom.output_shape() {
        return Err(Error::shape(
            "conv2d_input_adjoint",
            grad_out.shape(),
            &geom.output_shape(),
        ));
    }
    if kernel.shape() != geom.kernel_shape() {
        return Err(Error::shape(
            "conv2d_input_adjoint",
            kernel.shape(),
            &geom.kernel_shape(),
        ));
    }
    let region = region.unwrap_or(Region::full(geom.out_h, geom.out_w));
    let mut grad_in = Tensor::zeros(&geom.input_shape());
    let in_region = geom.input_region(&region);
    if region.area() == 0 {
        return Ok((grad_in, in_region));
    }

    let cout = geom.out_c;
    let patch = geom.patch_len();
    let positions = region.area();

    // Gather the outputs of the region into a dense positions×Cout block.
    let full_region = region == Region::full(geom.out_h, geom.out_w);
    let mut gathered = Vec::new();
    let lhs: &[T] = if full_region {
        grad_out.data()
    } else {
        gathered.reserve(positions * cout);
        for oy in region.row_start..region.row_end {
            let start = (oy * geom.out_w + region.col_start) * cout;
            let end = (oy * geom.out_w + region.col_end) * cout;
            gathered.extend_from_slice(&grad_out.data()[start..end]);
        }
        &gathered
    };

    if geom.is_pointwise() && full_region {
        T::gemm(
            positions,
            cout,
            patch,
            T::one(),
            lhs,
            (cout as isize, 1),
            kernel.data(),
            (1, cout as isize),
            T::zero(),
            grad_in.data_mut(),
            (patch as isize, 1),
        );
        return Ok((grad_in, in_region));
    }

    let mut cols = vec![T::zero(); positions * patch];
    T::gemm(
        positions,
        cout,
        patch,
        T::one(),
        lhs,
        (cout as isize, 1),
        kernel.data(),
        (1, cout as isize),
        T::zero(),
        &mut cols,
        (patch as isize, 1),
    );
    geom.col2im(&cols, &region, grad_in.data_mut());
    Ok((grad_in, in_region))
}

/// Gradient of `⟨conv2d(input, k) | grad_out⟩` with respect to `k`,
/// accumulated into `grad_kernel`.
pub fn conv2d_kernel_grad<T: Scalar>(
    input: &Tensor<T>,
    grad_out: &Tensor<T>,
    geom: &ConvGeometry,
    grad_kernel: &mut Tensor<T>,
) -> Result<()> {
    geom.check_input(input)?;
    if grad_out.shape() != geom.output_shape() || grad_kernel.shape() != geom.kernel_shape() {
        return Err(Error::shape(
            "conv2d_kernel_grad",
            grad_out.shape(),
            &geom.output_shape(),
        ));
    }
    let positions = geom.out_h * geom.out_w;
    let patch = geom.patch_len();
    let mut cols = Vec::new();
    let patches: &[T] = if geom.is_pointwise() {
        input.data()
    } else {
        geom.im2col(input.data(), &Region::full(geom.out_h, geom.out_w), &mut cols);
        &cols
    };
    T::gemm(
        patch,
        positions,
        geom.out_c,
        T::one(),
        patches,
        (1, patch as isize),
        grad_out.data(),
        (geom.out_c as isize, 1),
        T::one(),
        grad_kernel.data_mut(),
        (geom.out_c as isize, 1),
    );
    Ok(())
}

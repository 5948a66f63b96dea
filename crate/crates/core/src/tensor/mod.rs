//! Dense row-major tensors and the structural operations the rest of the
//! crate is built on.
//!
//! Images and feature maps are rank-3 `H×W×C` tensors, convolution kernels
//! are rank-4 `r1×r2×Cin×Cout`, fully-connected weights are `in×out`.

mod conv;
mod pool;

use std::fmt;

use num_traits::Float;

use crate::error::{Error, Result};

pub use conv::{conv2d, conv2d_input_adjoint, conv2d_kernel_grad, ConvGeometry, Region};
pub use pool::{
    avg_pool, avg_pool_adjoint, global_pool, global_pool_adjoint, shortcut_adjoint,
    shortcut_forward, PoolGeometry,
};

/// Slope of the leaky ReLU on the negative half-line.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Storage type tag, used by the on-disk formats and the CLI.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        })
    }
}

impl std::str::FromStr for DType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" | "binary32" => Ok(DType::F32),
            "f64" | "binary64" => Ok(DType::F64),
            other => Err(Error::invalid(format!("unknown dtype {other:?}"))),
        }
    }
}

/// Real scalar usable as a tensor element.
pub trait Scalar:
    Float
    + Default
    + fmt::Debug
    + fmt::Display
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;

    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `c = alpha * a·b + beta * c` with explicit row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );

    fn write_le(self, out: &mut Vec<u8>);

    /// Reads one value from the first `DTYPE.size()` bytes.
    fn read_le(bytes: &[u8]) -> Self;
}

fn check_gemm_bounds<T>(
    rows: usize,
    cols: usize,
    (rs, cs): (isize, isize),
    buf: &[T],
    what: &str,
) {
    if rows == 0 || cols == 0 {
        return;
    }
    assert!(rs >= 0 && cs >= 0, "negative strides for {what}");
    let last = (rows - 1) * rs as usize + (cols - 1) * cs as usize;
    assert!(last < buf.len(), "gemm operand {what} out of bounds");
}

macro_rules! impl_scalar {
    ($t:ty, $dtype:expr, $gemm:path) => {
        impl Scalar for $t {
            const DTYPE: DType = $dtype;

            #[inline]
            fn of(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
                c_strides: (isize, isize),
            ) {
                check_gemm_bounds(m, k, a_strides, a, "a");
                check_gemm_bounds(k, n, b_strides, b, "b");
                check_gemm_bounds(m, n, c_strides, c, "c");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every index the kernel touches was bounds-checked above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0,
                        c_strides.1,
                    );
                }
            }

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn read_le(bytes: &[u8]) -> Self {
                let mut raw = [0u8; std::mem::size_of::<$t>()];
                raw.copy_from_slice(&bytes[..std::mem::size_of::<$t>()]);
                <$t>::from_le_bytes(raw)
            }
        }
    };
}

impl_scalar!(f32, DType::F32, matrixmultiply::sgemm);
impl_scalar!(f64, DType::F64, matrixmultiply::dgemm);

/// Dense N-dimensional array, row-major.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        assert!(
            shape.iter().all(|&d| d > 0),
            "tensor dimensions must be positive: {shape:?}"
        );
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!(
                "tensor dimensions must be positive: {shape:?}"
            )));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} needs {len} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let mut t = Self::zeros(shape);
        for (idx, v) in t.data.iter_mut().enumerate() {
            *v = f(idx);
        }
        t
    }

    /// One-hot tensor with a single `1` at flat offset `at`.
    pub fn basis(shape: &[usize], at: usize) -> Self {
        let mut t = Self::zeros(shape);
        t.data[at] = T::one();
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [h, w, c] => Ok((h, w, c)),
            _ => Err(Error::invalid(format!(
                "expected a rank-3 H×W×C tensor, got {:?}",
                self.shape
            ))),
        }
    }

    #[inline]
    pub fn at3(&self, y: usize, x: usize, c: usize) -> T {
        let (w, ch) = (self.shape[1], self.shape[2]);
        self.data[(y * w + x) * ch + c]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape("zip_map", other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_same_shape("add_assign", other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|v| v * k)
    }

    pub fn scale_in_place(&mut self, k: T) {
        for v in &mut self.data {
            *v *= k;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc.max(v.abs()))
    }

    pub fn l2_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|v| {
                let v = v.as_f64();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (idx, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = idx;
            }
        }
        best
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.expect_same_shape("max_abs_diff", other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }

    pub(crate) fn expect_same_shape(&self, op: &'static str, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        Ok(())
    }
}

/// `⟨a | b⟩ = Σ a·b` over all elements.
pub fn inner_product<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    a.expect_same_shape("inner_product", b)?;
    Ok(a.data
        .iter()
        .zip(&b.data)
        .fold(T::zero(), |acc, (&x, &y)| acc + x * y))
}

/// `⟨a | b⟩` with products and sum taken in binary64, for measurements whose
/// own summation noise should not mask the error being measured.
pub fn inner_product_wide<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    a.expect_same_shape("inner_product", b)?;
    Ok(a.data
        .iter()
        .zip(&b.data)
        .fold(0.0, |acc, (&x, &y)| acc + x.as_f64() * y.as_f64()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ActivationKind {
    Relu,
    LeakyRelu,
    Relu6,
}

impl ActivationKind {
    #[inline]
    pub fn apply<T: Scalar>(self, v: T) -> T {
        match self {
            ActivationKind::Relu => v.max(T::zero()),
            ActivationKind::LeakyRelu => {
                if v >= T::zero() {
                    v
                } else {
                    v * T::of(LEAKY_SLOPE)
                }
            }
            ActivationKind::Relu6 => v.max(T::zero()).min(T::of(6.0)),
        }
    }

    /// Derivative at `v`; the kink at zero (and at six for ReLU6) takes the
    /// closed-gate value.
    #[inline]
    pub fn derivative<T: Scalar>(self, v: T) -> T {
        match self {
            ActivationKind::Relu => {
                if v > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            ActivationKind::LeakyRelu => {
                if v > T::zero() {
                    T::one()
                } else {
                    T::of(LEAKY_SLOPE)
                }
            }
            ActivationKind::Relu6 => {
                if v > T::zero() && v < T::of(6.0) {
                    T::one()
                } else {
                    T::zero()
                }
            }
        }
    }

    /// Whether `f(k·x) = k·f(x)` for every `k > 0`.
    pub fn is_positively_homogeneous(self) -> bool {
        !matches!(self, ActivationKind::Relu6)
    }

    pub fn tag(self) -> u8 {
        match self {
            ActivationKind::Relu => 0,
            ActivationKind::LeakyRelu => 1,
            ActivationKind::Relu6 => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(ActivationKind::Relu),
            1 => Some(ActivationKind::LeakyRelu),
            2 => Some(ActivationKind::Relu6),
            _ => None,
        }
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ActivationKind::Relu => "relu",
            ActivationKind::LeakyRelu => "leaky_relu",
            ActivationKind::Relu6 => "relu6",
        })
    }
}

pub fn activation<T: Scalar>(input: &Tensor<T>, kind: ActivationKind) -> Tensor<T> {
    input.map(|v| kind.apply(v))
}

/// Fully-connected map `y = xᵀW`; `x` is flattened, `weight` is `in×out`.
pub fn fully_connected<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>) -> Result<Tensor<T>> {
    let (fan_in, fan_out) = fc_dims(weight)?;
    if input.len() != fan_in {
        return Err(Error::shape("fully_connected", input.shape(), weight.shape()));
    }
    let mut out = Tensor::zeros(&[fan_out]);
    T::gemm(
        1,
        fan_in,
        fan_out,
        T::one(),
        input.data(),
        (fan_in as isize, 1),
        weight.data(),
        (fan_out as isize, 1),
        T::zero(),
        out.data_mut(),
        (fan_out as isize, 1),
    );
    Ok(out)
}

/// Adjoint of [`fully_connected`] in its input: `W·g`, reshaped to `input_shape`.
pub fn fully_connected_adjoint<T: Scalar>(
    grad: &Tensor<T>,
    weight: &Tensor<T>,
    input_shape: &[usize],
) -> Result<Tensor<T>> {
    let (fan_in, fan_out) = fc_dims(weight)?;
    if grad.len() != fan_out || input_shape.iter().product::<usize>() != fan_in {
        return Err(Error::shape("fully_connected_adjoint", grad.shape(), weight.shape()));
    }
    let mut out = Tensor::zeros(input_shape);
    T::gemm(
        fan_in,
        fan_out,
        1,
        T::one(),
        weight.data(),
        (fan_out as isize, 1),
        grad.data(),
        (1, 1),
        T::zero(),
        out.data_mut(),
        (1, 1),
    );
    Ok(out)
}

fn fc_dims<T: Scalar>(weight: &Tensor<T>) -> Result<(usize, usize)> {
    match weight.shape() {
        &[i, o] => Ok((i, o)),
        other => Err(Error::invalid(format!(
            "fully-connected weight must be rank 2, got {other:?}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inner_product_examples() {
        let a = Tensor::<f64>::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let b = Tensor::<f64>::from_vec(&[3], vec![4.0, 5.0, 6.0]).unwrap();
        assert_eq!(inner_product(&a, &b).unwrap(), 32.0);

        let z = Tensor::<f64>::zeros(&[3]);
        assert_eq!(inner_product(&z, &b).unwrap(), 0.0);

        let e = Tensor::<f64>::basis(&[2, 2, 1], 3);
        assert_eq!(inner_product(&e, &e).unwrap(), 1.0);
    }

    #[test]
    fn inner_product_rejects_mismatch() {
        let a = Tensor::<f32>::zeros(&[3]);
        let b = Tensor::<f32>::zeros(&[1, 3]);
        match inner_product(&a, &b) {
            Err(Error::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, vec![3]);
                assert_eq!(right, vec![1, 3]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn activation_examples() {
        assert_eq!(ActivationKind::Relu.apply(-1.0f64), 0.0);
        assert_eq!(ActivationKind::Relu.apply(2.0f64), 2.0);
        assert_eq!(ActivationKind::LeakyRelu.apply(-1.0f64), -0.2);
        assert_eq!(ActivationKind::Relu6.apply(7.0f64), 6.0);
        assert_eq!(ActivationKind::Relu6.apply(-3.0f64), 0.0);
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f32>::from_vec(&[2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::from_vec(&[0], vec![]).is_err());
    }

    #[test]
    fn fc_adjoint_matches_transpose() {
        let w = Tensor::<f64>::from_fn(&[6, 4], |i| (i as f64 * 0.37).sin());
        let x = Tensor::<f64>::from_fn(&[1, 2, 3], |i| i as f64 - 2.5);
        let g = Tensor::<f64>::from_fn(&[4], |i| 1.0 / (i as f64 + 1.0));
        let y = fully_connected(&x, &w).unwrap();
        let back = fully_connected_adjoint(&g, &w, x.shape()).unwrap();
        let lhs = inner_product(&y, &g).unwrap();
        let rhs = inner_product(&x, &back).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}

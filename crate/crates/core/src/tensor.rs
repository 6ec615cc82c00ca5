//! Dense real and complex tensors.
//!
//! Storage is row-major with batch-channel-height-width axis order. Complex
//! tensors are planar: a full real plane followed by a full imaginary plane,
//! each an ordinary [`Tensor`].

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::sync::Arc;

use num_traits::{Float, FromPrimitive, NumAssign};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Floating-point element type. `f32` is used for training, `f64` for
/// oracles and gradient verification.
pub trait Scalar:
    Float + FromPrimitive + NumAssign + Default + Debug + Display + Send + Sync + Sum + 'static
{
    const DTYPE: DType;

    /// `c = alpha * a * b + beta * c` with explicit row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: usize,
        csa: usize,
        b: &[Self],
        rsb: usize,
        csb: usize,
        beta: Self,
        c: &mut [Self],
        rsc: usize,
        csc: usize,
    );

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to any Scalar")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

fn extent(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

macro_rules! impl_scalar {
    ($t:ty, $dtype:expr, $gemm:path) => {
        impl Scalar for $t {
            const DTYPE: DType = $dtype;

            fn gemm_raw(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: usize,
                csa: usize,
                b: &[Self],
                rsb: usize,
                csb: usize,
                beta: Self,
                c: &mut [Self],
                rsc: usize,
                csc: usize,
            ) {
                assert!(a.len() >= extent(m, k, rsa, csa), "gemm: lhs too short");
                assert!(b.len() >= extent(k, n, rsb, csb), "gemm: rhs too short");
                assert!(c.len() >= extent(m, n, rsc, csc), "gemm: output too short");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: the asserts above bound every offset the kernel
                // touches, all strides are non-negative, and `c` is borrowed
                // mutably so it cannot alias `a` or `b`.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa as isize,
                        csa as isize,
                        b.as_ptr(),
                        rsb as isize,
                        csb as isize,
                        beta,
                        c.as_mut_ptr(),
                        rsc as isize,
                        csc as isize,
                    );
                }
            }

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn read_le(bytes: &[u8]) -> Self {
                let mut buf = [0u8; std::mem::size_of::<$t>()];
                buf.copy_from_slice(&bytes[..std::mem::size_of::<$t>()]);
                <$t>::from_le_bytes(buf)
            }
        }
    };
}

impl_scalar!(f32, DType::F32, matrixmultiply::sgemm);
impl_scalar!(f64, DType::F64, matrixmultiply::dgemm);

/// Row-major matrix product helper over contiguous buffers:
/// `c[m,n] = alpha * op(a) * op(b) + beta * c`, where `op` optionally
/// transposes. `a` is stored as `[m,k]` (or `[k,m]` when `ta`), `b` as
/// `[k,n]` (or `[n,k]` when `tb`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    beta: T,
    c: &mut [T],
) {
    let (rsa, csa) = if ta { (1, m) } else { (k, 1) };
    let (rsb, csb) = if tb { (1, k) } else { (n, 1) };
    T::gemm_raw(m, k, n, T::one(), a, rsa, csa, b, rsb, csb, beta, c, n, 1);
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.is_empty() {
            return Err(Error::shape("shape needs at least one dimension"));
        }
        if let Some(d) = dims.iter().position(|&d| d == 0) {
            return Err(Error::shape(format!("dimension {d} of {dims:?} is zero")));
        }
        let mut count: usize = 1;
        for &d in &dims {
            count = count
                .checked_mul(d)
                .filter(|&c| c <= isize::MAX as usize / 8)
                .ok_or_else(|| Error::Size(format!("element count of {dims:?} overflows")))?;
        }
        Ok(Shape(dims))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn ndim(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Interprets the shape as `[B, C, H, W]`.
    pub fn nchw(&self) -> Result<[usize; 4]> {
        match self.0.as_slice() {
            &[b, c, h, w] => Ok([b, c, h, w]),
            d => Err(Error::shape(format!("expected [B,C,H,W], got {d:?}"))),
        }
    }
}

impl Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

impl From<Shape> for Vec<usize> {
    fn from(s: Shape) -> Self {
        s.0
    }
}

/// Dense real tensor. Cloning is cheap: the buffer is shared until mutated.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Shape,
    data: Arc<Vec<T>>,
}

pub type RealTensor<T = f32> = Tensor<T>;

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(dims: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != data.len() {
            return Err(Error::shape(format!(
                "shape {shape} needs {} elements, got {}",
                shape.numel(),
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    pub(crate) fn from_shape_vec(shape: Shape, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn full(dims: impl Into<Vec<usize>>, value: T) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let n = shape.numel();
        Ok(Self::from_shape_vec(shape, vec![value; n]))
    }

    pub fn zeros(dims: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(dims, T::zero())
    }

    pub fn ones(dims: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(dims, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self::from_shape_vec(Shape(vec![1]), vec![value])
    }

    pub(crate) fn zeros_like(&self) -> Self {
        Self::from_shape_vec(self.shape.clone(), vec![T::zero(); self.numel()])
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut Vec<T> {
        Arc::make_mut(&mut self.data)
    }

    pub fn into_vec(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, dims: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != self.numel() {
            return Err(Error::shape(format!(
                "cannot reshape {} into {shape}",
                self.shape
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_shape_vec(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Self::from_shape_vec(self.shape.clone(), data))
    }

    pub(crate) fn expect_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "shape mismatch: {} vs {}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// In-place `self += other`.
    pub(crate) fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data_mut().iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    /// Standard matrix product of `[m,k] x [k,n]`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (&[m, k], &[k2, n]) = (self.dims(), other.dims()) else {
            return Err(Error::shape(format!(
                "matmul expects matrices, got {} and {}",
                self.shape, other.shape
            )));
        };
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dimensions differ: {} vs {}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.data(), false, other.data(), false, T::zero(), &mut out);
        Ok(Self::from_shape_vec(Shape(vec![m, n]), out))
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::from_shape_vec(
            self.shape.clone(),
            self.data.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
        )
    }
}

/// Planar complex tensor: `re` and `im` share one shape.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexTensor<T = f32> {
    pub re: Tensor<T>,
    pub im: Tensor<T>,
}

impl<T: Scalar> ComplexTensor<T> {
    pub fn from_parts(re: Tensor<T>, im: Tensor<T>) -> Result<Self> {
        re.expect_same_shape(&im)?;
        Ok(ComplexTensor { re, im })
    }

    /// Lifts a real image into the complex domain with a zero imaginary
    /// plane.
    pub fn from_real(x: &Tensor<T>) -> Self {
        ComplexTensor {
            re: x.clone(),
            im: x.zeros_like(),
        }
    }

    pub fn zeros(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let re = Tensor::zeros(dims)?;
        Ok(ComplexTensor {
            im: re.clone(),
            re,
        })
    }

    pub fn shape(&self) -> &Shape {
        self.re.shape()
    }

    pub fn numel(&self) -> usize {
        self.re.numel()
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        Ok(ComplexTensor {
            re: self.re.add(&other.re)?,
            im: self.im.add(&other.im)?,
        })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        Ok(ComplexTensor {
            re: self.re.sub(&other.re)?,
            im: self.im.sub(&other.im)?,
        })
    }

    /// Elementwise `(a_r b_r - a_i b_i) + (a_i b_r + a_r b_i) i`.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.re.expect_same_shape(&other.re)?;
        let n = self.numel();
        let (ar, ai, br, bi) = (self.re.data(), self.im.data(), other.re.data(), other.im.data());
        let mut re = Vec::with_capacity(n);
        let mut im = Vec::with_capacity(n);
        for j in 0..n {
            re.push(ar[j] * br[j] - ai[j] * bi[j]);
            im.push(ai[j] * br[j] + ar[j] * bi[j]);
        }
        Ok(ComplexTensor {
            re: Tensor::from_shape_vec(self.shape().clone(), re),
            im: Tensor::from_shape_vec(self.shape().clone(), im),
        })
    }

    pub fn magnitude(&self) -> Tensor<T> {
        self.re
            .zip_map(&self.im, |r, i| r.hypot(i))
            .expect("planes share a shape")
    }

    pub fn is_finite(&self) -> bool {
        self.re.is_finite() && self.im.is_finite()
    }
}

/// Componentwise complex arithmetic on tensors, spelled the short way.
pub fn cadd<T: Scalar>(a: &ComplexTensor<T>, b: &ComplexTensor<T>) -> Result<ComplexTensor<T>> {
    a.add(b)
}

pub fn csub<T: Scalar>(a: &ComplexTensor<T>, b: &ComplexTensor<T>) -> Result<ComplexTensor<T>> {
    a.sub(b)
}

pub fn cmul<T: Scalar>(a: &ComplexTensor<T>, b: &ComplexTensor<T>) -> Result<ComplexTensor<T>> {
    a.mul(b)
}

pub fn magnitude<T: Scalar>(x: &ComplexTensor<T>) -> Tensor<T> {
    x.magnitude()
}

pub fn complex_from_real<T: Scalar>(x: &Tensor<T>) -> ComplexTensor<T> {
    ComplexTensor::from_real(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn c1(re: f64, im: f64) -> ComplexTensor<f64> {
        ComplexTensor::from_parts(
            Tensor::from_vec([1], vec![re]).unwrap(),
            Tensor::from_vec([1], vec![im]).unwrap(),
        )
        .unwrap()
    }

    fn parts(z: &ComplexTensor<f64>) -> (f64, f64) {
        (z.re.data()[0], z.im.data()[0])
    }

    #[test]
    fn fills() {
        assert_eq!(Tensor::<f32>::zeros([2, 2]).unwrap().data(), &[0.0; 4]);
        assert_eq!(Tensor::<f32>::ones([3]).unwrap().data(), &[1.0; 3]);
        assert_eq!(Tensor::<f32>::full([1], 2.5).unwrap().data(), &[2.5]);
    }

    #[test]
    fn overflowing_shape_is_size_error() {
        let err = Tensor::<f32>::zeros([usize::MAX / 2, 4]).unwrap_err();
        assert!(matches!(err, Error::Size(_)), "{err}");
        assert!(matches!(Shape::new([3, 0]), Err(Error::Shape(_))));
    }

    #[test]
    fn complex_from_real_has_no_phase() {
        let x = Tensor::from_vec([2], vec![1.0f32, 2.0]).unwrap();
        let z = complex_from_real(&x);
        assert_eq!(z.re.data(), &[1.0, 2.0]);
        assert_eq!(z.im.data(), &[0.0, 0.0]);
        let z = complex_from_real(&Tensor::<f32>::from_vec([1], vec![-3.0]).unwrap());
        assert_eq!((z.re.data()[0], z.im.data()[0]), (-3.0, 0.0));
    }

    #[test]
    fn cmul_examples() {
        assert_eq!(parts(&cmul(&c1(1.0, 0.0), &c1(-2.5, 7.0)).unwrap()), (-2.5, 7.0));
        assert_eq!(parts(&cmul(&c1(0.0, 1.0), &c1(0.0, 1.0)).unwrap()), (-1.0, 0.0));
        assert_eq!(parts(&cmul(&c1(2.0, 3.0), &c1(4.0, -1.0)).unwrap()), (11.0, 10.0));
    }

    #[test]
    fn cmul_shape_mismatch() {
        let a = ComplexTensor::<f32>::zeros([2]).unwrap();
        let b = ComplexTensor::<f32>::zeros([3]).unwrap();
        assert!(matches!(cmul(&a, &b), Err(Error::Shape(_))));
        assert!(matches!(cadd(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn magnitude_examples() {
        assert_eq!(magnitude(&c1(3.0, 4.0)).data(), &[5.0]);
        assert_eq!(magnitude(&c1(0.0, 0.0)).data(), &[0.0]);
        assert_eq!(magnitude(&c1(-1.0, 0.0)).data(), &[1.0]);
    }

    #[test]
    fn matmul_examples() {
        let m = Tensor::from_vec([2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let id = Tensor::from_vec([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(id.matmul(&m).unwrap(), m);
        let ones = Tensor::from_vec([2, 1], vec![1.0, 1.0]).unwrap();
        assert_eq!(m.matmul(&ones).unwrap().data(), &[3.0, 7.0]);
        let z = Tensor::<f64>::zeros([3, 2]).unwrap();
        assert_eq!(z.matmul(&m).unwrap().data(), &[0.0; 6]);
        assert!(matches!(m.matmul(&z), Err(Error::Shape(_))));
    }

    fn complex_pair(n: usize) -> impl Strategy<Value = (Vec<f32>, Vec<f32>, Vec<f32>, Vec<f32>)> {
        let v = || proptest::collection::vec(-10.0f32..10.0, n);
        (v(), v(), v(), v())
    }

    proptest! {
        #[test]
        fn cmul_commutes_and_cadd_associates((ar, ai, br, bi) in complex_pair(16), cr in proptest::collection::vec(-10.0f32..10.0, 16)) {
            let t = |v: &Vec<f32>| Tensor::from_vec([4, 4], v.clone()).unwrap();
            let a = ComplexTensor::from_parts(t(&ar), t(&ai)).unwrap();
            let b = ComplexTensor::from_parts(t(&br), t(&bi)).unwrap();
            let c = ComplexTensor::from_parts(t(&cr), t(&ar)).unwrap();
            let ab = cmul(&a, &b).unwrap();
            let ba = cmul(&b, &a).unwrap();
            prop_assert_eq!(&ab, &ba);
            let l = cadd(&cadd(&a, &b).unwrap(), &c).unwrap();
            let r = cadd(&a, &cadd(&b, &c).unwrap()).unwrap();
            for (x, y) in l.re.data().iter().chain(l.im.data()).zip(r.re.data().iter().chain(r.im.data())) {
                prop_assert!((x - y).abs() <= 1e-6 * x.abs().max(y.abs()).max(1.0));
            }
            prop_assert!(ab.is_finite() && l.is_finite() && a.magnitude().is_finite());
            prop_assert!(csub(&a, &b).unwrap().is_finite());
        }

        #[test]
        fn magnitude_of_lifted_real_is_abs(v in proptest::collection::vec(-10.0f64..10.0, 1..32)) {
            let x = Tensor::from_vec([v.len()], v.clone()).unwrap();
            let m = magnitude(&complex_from_real(&x));
            for (a, b) in m.data().iter().zip(&v) {
                prop_assert_eq!(*a, b.abs());
            }
        }

        #[test]
        fn matmul_stays_finite(a in proptest::collection::vec(-10.0f32..10.0, 12), b in proptest::collection::vec(-10.0f32..10.0, 8)) {
            let a = Tensor::from_vec([3, 4], a).unwrap();
            let b = Tensor::from_vec([4, 2], b).unwrap();
            prop_assert!(a.matmul(&b).unwrap().is_finite());
        }
    }
}

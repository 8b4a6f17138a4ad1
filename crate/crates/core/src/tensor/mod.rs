//! Dense tensors and a tape-based reverse-mode autodiff engine.
//!
//! [`Tensor`] is a plain row-major value array. Differentiation happens on a
//! [`Tape`]: tensors placed on the tape become [`Var`]s, every operation on a
//! `Var` is recorded, and [`Tape::backward`] replays the recorded rules in
//! reverse. A tensor's `requires_grad` flag and gradient live on its `Var`.
//!
//! All numeric code is generic over [`Scalar`] so the same graph runs in
//! `f32` (training, attacks) and `f64` (gradient checks).

mod gradcheck;
pub(crate) mod kernels;
mod ops;
mod tape;

pub use gradcheck::{grad_check, grad_check_at};
pub use kernels::{ConvGeom, PoolGeom};
pub use tape::{Tape, Var};

use crate::error::{Error, Result};
use num_traits::{Float, FromPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::AddAssign;

/// Floating-point element type usable on a tape.
pub trait Scalar:
    Float + FromPrimitive + Default + Debug + Display + Sum + AddAssign + Send + Sync + 'static
{
    const NAME: &'static str;

    /// `c = alpha * a * b + beta * c` with explicit strides.
    ///
    /// # Safety
    /// Strides and extents must describe memory inside the given pointers.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row-major n-dimensional array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} holds {numel} elements, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: (0..numel).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading (batch) extent, or 1 for a rank-0 shape.
    pub fn batch(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Elements per leading index.
    pub fn sample_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "zip",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
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

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn dot(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .sum()
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |acc, &v| if v.abs() > acc { v.abs() } else { acc })
    }

    /// Slice of the `i`-th entry along the leading dimension.
    pub fn sample(&self, i: usize) -> &[T] {
        let len = self.sample_len();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [T] {
        let len = self.sample_len();
        &mut self.data[i * len..(i + 1) * len]
    }

    /// Gathers leading-dimension entries into a new tensor.
    pub fn select(&self, indices: &[usize]) -> Self {
        let len = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        let mut shape = self.shape.clone();
        if shape.is_empty() {
            shape.push(indices.len());
        } else {
            shape[0] = indices.len();
        }
        Tensor { shape, data }
    }

    /// Row-wise argmax of a `[N, K]` tensor; ties go to the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        let k = self.sample_len();
        (0..self.batch())
            .map(|n| {
                let row = self.sample(n);
                let mut best = 0;
                for j in 1..k {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64(v.as_f64()).unwrap_or(U::nan()))
                .collect(),
        }
    }

    pub fn has_nan(&self) -> bool {
        self.data.iter().any(|v| v.is_nan())
    }
}

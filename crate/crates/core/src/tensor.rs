//! Dense 5-D tensors in `(n, c, t, h, w)` row-major order.
//!
//! Offset of element `(n, c, t, h, w)` is
//! `(((n * C + c) * T + t) * H + h) * W + w`, so a `(n, c)` pair addresses a
//! contiguous `T·H·W` plane. Every kernel in the crate relies on that.

use std::fmt;
use std::iter::Sum;
use std::ops::AddAssign;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Element type of a tensor. Implemented for `f32` (storage for training)
/// and `f64` (used by gradient checks).
pub trait Scalar:
    Float + AddAssign + Sum + Default + Send + Sync + fmt::Debug + fmt::Display + 'static
{
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Extents of a 5-D tensor. All extents are at least one and the element
/// count fits in `usize`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "[usize; 5]", into = "[usize; 5]")]
pub struct Shape5 {
    dims: [usize; 5],
}

impl Shape5 {
    pub fn new(n: usize, c: usize, t: usize, h: usize, w: usize) -> Result<Self> {
        Self::from_dims([n, c, t, h, w])
    }

    pub fn from_dims(dims: [usize; 5]) -> Result<Self> {
        if let Some(axis) = dims.iter().position(|&d| d == 0) {
            return Err(Error::Size(format!(
                "extent {axis} of {dims:?} is zero"
            )));
        }
        dims.iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Size(format!("element count of {dims:?} overflows")))?;
        Ok(Shape5 { dims })
    }

    #[inline]
    pub fn dims(&self) -> [usize; 5] {
        self.dims
    }
    #[inline]
    pub fn n(&self) -> usize {
        self.dims[0]
    }
    #[inline]
    pub fn c(&self) -> usize {
        self.dims[1]
    }
    #[inline]
    pub fn t(&self) -> usize {
        self.dims[2]
    }
    #[inline]
    pub fn h(&self) -> usize {
        self.dims[3]
    }
    #[inline]
    pub fn w(&self) -> usize {
        self.dims[4]
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }

    /// Voxels per `(n, c)` plane.
    #[inline]
    pub fn plane(&self) -> usize {
        self.dims[2] * self.dims[3] * self.dims[4]
    }

    #[inline]
    pub fn offset(&self, idx: [usize; 5]) -> usize {
        let [_, c, t, h, w] = self.dims;
        (((idx[0] * c + idx[1]) * t + idx[2]) * h + idx[3]) * w + idx[4]
    }

    pub fn index(&self, mut offset: usize) -> [usize; 5] {
        let mut idx = [0; 5];
        for axis in (0..5).rev() {
            idx[axis] = offset % self.dims[axis];
            offset /= self.dims[axis];
        }
        idx
    }

    pub fn with_batch(&self, n: usize) -> Result<Self> {
        let [_, c, t, h, w] = self.dims;
        Shape5::new(n, c, t, h, w)
    }
}

impl TryFrom<[usize; 5]> for Shape5 {
    type Error = Error;
    fn try_from(dims: [usize; 5]) -> Result<Self> {
        Shape5::from_dims(dims)
    }
}

impl From<Shape5> for [usize; 5] {
    fn from(s: Shape5) -> Self {
        s.dims
    }
}

impl fmt::Debug for Shape5 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl fmt::Display for Shape5 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [n, c, t, h, w] = self.dims;
        write!(f, "{n}x{c}x{t}x{h}x{w}")
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor5<T = f32> {
    shape: Shape5,
    data: Vec<T>,
}

impl<T: Scalar> Tensor5<T> {
    pub fn full(shape: Shape5, fill: T) -> Self {
        Tensor5 {
            shape,
            data: vec![fill; shape.numel()],
        }
    }

    pub fn zeros(shape: Shape5) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn from_vec(shape: Shape5, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::shape(format!(
                "buffer of {} elements does not fit shape {shape}",
                data.len()
            )));
        }
        Ok(Tensor5 { shape, data })
    }

    /// I.i.d. normal samples with mean zero, drawn in flat order.
    pub fn seeded_normal(shape: Shape5, rng: &mut Rng, std: f64) -> Result<Self> {
        if !(std > 0.0) || !std.is_finite() {
            return Err(Error::param(format!("std must be positive, got {std}")));
        }
        let data = (0..shape.numel())
            .map(|_| T::of(rng.normal() * std))
            .collect();
        Ok(Tensor5 { shape, data })
    }

    #[inline]
    pub fn shape(&self) -> &Shape5 {
        &self.shape
    }
    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }
    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
    pub fn into_vec(self) -> Vec<T> {
        self.data
    }
    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }
    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, idx: [usize; 5]) -> T {
        self.data[self.shape.offset(idx)]
    }

    #[inline]
    pub fn set(&mut self, idx: [usize; 5], v: T) {
        let o = self.shape.offset(idx);
        self.data[o] = v;
    }

    /// The contiguous `T·H·W` plane of sample `n`, channel `c`.
    #[inline]
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c() + c) * p;
        &self.data[start..start + p]
    }

    pub fn reshape(self, shape: Shape5) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor5 {
            shape: self.shape,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_shape(other.shape(), "zip_map")?;
        Ok(Tensor5 {
            shape: self.shape,
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

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_shape(other.shape(), "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|x| x * k)
    }

    /// `max(x, 0)`; NaN passes through so non-finite values stay visible.
    pub fn relu(&self) -> Self {
        self.map(|x| if x < T::zero() { T::zero() } else { x })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|x| x.as_f64()).sum()
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        self.expect_shape(other.shape(), "dot")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.as_f64() * b.as_f64())
            .sum())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.expect_shape(other.shape(), "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor5<U> {
        Tensor5 {
            shape: self.shape,
            data: self.data.iter().map(|x| U::of(x.as_f64())).collect(),
        }
    }

    pub(crate) fn expect_shape(&self, other: &Shape5, what: &str) -> Result<()> {
        if self.shape != *other {
            return Err(Error::shape(format!(
                "{what}: shapes {} and {other} differ",
                self.shape
            )));
        }
        Ok(())
    }
}

/// Apply `f` elementwise to `a`, or to `(a, b)` when `b` is given.
/// Shapes must match exactly; nothing is broadcast.
pub fn map_zip<T: Scalar>(
    a: &Tensor5<T>,
    b: Option<&Tensor5<T>>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor5<T>> {
    match b {
        Some(b) => a.zip_map(b, f),
        None => Ok(a.map(|x| f(x, T::zero()))),
    }
}

impl<T: Scalar> fmt::Debug for Tensor5<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor5({}, ", self.shape)?;
        let head: Vec<_> = self.data.iter().take(6).collect();
        write!(f, "{head:?}")?;
        if self.data.len() > 6 {
            write!(f, "..")?;
        }
        write!(f, ")")
    }
}

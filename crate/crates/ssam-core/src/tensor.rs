//! Minimal dense tensor with contiguous row-major storage.
//!
//! Training runs in `f32`; oracles and gradient checks instantiate the same
//! code with `f64`. All operations are pure (value in, value out) and safe to
//! call from multiple threads. Large matrix products parallelize over output
//! rows with a fixed per-row accumulation order, so results are independent of
//! the thread count.

use std::fmt;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};
use rayon::prelude::*;

use crate::error::{Result, SsamError};

/// Element type for tensors: `f32` for training, `f64` for oracle tests.
pub trait Scalar:
    Float + FromPrimitive + Sum<Self> + Send + Sync + fmt::Debug + fmt::Display + 'static
{
    /// Dtype tag used by the binary tensor container.
    const DTYPE: &'static str;
    /// Serialized width in bytes (little-endian).
    const BYTES: usize;

    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, buf: &mut Vec<u8>);
    fn read_le(buf: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    fn of_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, buf: &mut Vec<u8>) {
        buf.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(buf: &[u8]) -> Self {
        f32::from_le_bytes([buf[0], buf[1], buf[2], buf[3]])
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    fn of_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, buf: &mut Vec<u8>) {
        buf.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(buf: &[u8]) -> Self {
        f64::from_le_bytes([
            buf[0], buf[1], buf[2], buf[3], buf[4], buf[5], buf[6], buf[7],
        ])
    }
}

/// Dense row-major tensor. `product(shape) == data.len()` always holds.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

/// Matrix products below this many multiply-adds stay single-threaded.
const PAR_MATMUL_WORK: usize = 1 << 16;

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<F>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(SsamError::Shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![F::zero(); numel],
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, v: F) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![v; numel],
        }
    }

    /// Single-element tensor of shape `[1]`.
    pub fn scalar(v: F) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// The two extents of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(SsamError::Shape(format!("expected rank 2, got {s:?}"))),
        }
    }

    pub fn dims1(&self) -> Result<usize> {
        match self.shape.as_slice() {
            [n] => Ok(*n),
            s => Err(SsamError::Shape(format!("expected rank 1, got {s:?}"))),
        }
    }

    /// Row `r` of a rank-2 tensor as a slice.
    pub fn row(&self, r: usize) -> &[F] {
        let c = self.shape[self.shape.len() - 1];
        &self.data[r * c..(r + 1) * c]
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(F, F) -> F) -> Result<Self> {
        if self.shape != other.shape {
            return Err(SsamError::Shape(format!(
                "elementwise op on {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Self {
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

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: F) -> Self {
        self.map(|v| v * s)
    }

    /// In-place `self += other`, used by gradient accumulators.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(SsamError::Shape(format!(
                "add_assign on {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn sum(&self) -> F {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> F {
        if self.data.is_empty() {
            return F::zero();
        }
        self.sum() / F::of_f64(self.data.len() as f64)
    }

    pub fn max_abs(&self) -> F {
        self.data
            .iter()
            .fold(F::zero(), |m, &v| if v.abs() > m { v.abs() } else { m })
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Self) -> Result<F> {
        Ok(self.sub(other)?.max_abs())
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Matrix product of rank-2 tensors, `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        let (m, k) = self.dims2()?;
        let (k2, n) = rhs.dims2()?;
        if k != k2 {
            return Err(SsamError::Shape(format!(
                "matmul [{m}, {k}] x [{k2}, {n}]"
            )));
        }
        let mut out = vec![F::zero(); m * n];
        let kernel = |r: usize, orow: &mut [F]| {
            let arow = &self.data[r * k..(r + 1) * k];
            for (i, &a) in arow.iter().enumerate() {
                let brow = &rhs.data[i * n..(i + 1) * n];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o = *o + a * b;
                }
            }
        };
        if m * k * n >= PAR_MATMUL_WORK && m > 1 {
            out.par_chunks_mut(n)
                .enumerate()
                .for_each(|(r, orow)| kernel(r, orow));
        } else {
            for (r, orow) in out.chunks_mut(n).enumerate() {
                kernel(r, orow);
            }
        }
        Tensor::new([m, n], out)
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose2(&self) -> Result<Self> {
        let (m, n) = self.dims2()?;
        let mut out = vec![F::zero(); m * n];
        for r in 0..m {
            for c in 0..n {
                out[c * m + r] = self.data[r * n + c];
            }
        }
        Tensor::new([n, m], out)
    }

    /// Lossy element cast between precisions (used to lift f32 weights into
    /// f64 oracle mode and back).
    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| G::of_f64(v.as_f64())).collect(),
        }
    }
}

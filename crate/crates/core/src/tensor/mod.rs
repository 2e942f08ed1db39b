//! Dense tensors and a reverse-mode gradient tape.
//!
//! [`Tensor`] is plain data: a shape and a contiguous row-major buffer.
//! Computations that need gradients are recorded on a [`Tape`], which hands
//! out lightweight [`Var`] handles. Four-dimensional data is laid out as
//! `N x C x H x W`.
//!
//! Padding convention for convolutions: with kernel size `k` the padding is
//! `(k - 1) / 2` at every stride. At stride 1 with odd `k` this is "same"
//! padding; at stride 2 it halves even spatial extents exactly, and the
//! transposed convolution with the same rule doubles them.

pub mod gradcheck;
mod conv;
mod params;
mod tape;
#[cfg(test)]
mod tape_tests;

pub use params::{read_weights, write_weights, Bound, Constraint, ParamBuilder, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};

use std::fmt;
use std::iter::Sum;
use std::ops::AddAssign;

use num_traits::Float;

use crate::error::{shape_err, Error, Result};

/// Floating point element type. Training and coding run at `f32`; gradient
/// verification runs at `f64`.
pub trait Real:
    Float + Default + Send + Sync + fmt::Debug + fmt::Display + Sum + AddAssign + 'static
{
    fn of(v: f64) -> Self;
    fn f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn f64(self) -> f64 {
        self
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(
                "Tensor::new",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            );
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), data.iter().map(|&v| T::of(v)).collect())
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// `(N, C, H, W)` for a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => shape_err("dims4", format!("expected rank 4, got {:?}", self.shape)),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return shape_err("reshape", format!("{:?} -> {shape:?}", self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn check_finite(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite { op })
        }
    }

    /// Channel slice `[start, start + len)` of a rank-4 tensor.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Self> {
        let (n, c, h, w) = self.dims4()?;
        if start + len > c {
            return shape_err("slice_channels", format!("{start}+{len} > {c}"));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * len * plane);
        for ni in 0..n {
            let base = (ni * c + start) * plane;
            data.extend_from_slice(&self.data[base..base + len * plane]);
        }
        Self::new(vec![n, len, h, w], data)
    }

    /// Batch element `index` of a rank-4 tensor, keeping a batch axis of 1.
    pub fn batch_item(&self, index: usize) -> Result<Self> {
        let (n, c, h, w) = self.dims4()?;
        if index >= n {
            return shape_err("batch_item", format!("{index} >= {n}"));
        }
        let sz = c * h * w;
        Self::new(vec![1, c, h, w], self.data[index * sz..(index + 1) * sz].to_vec())
    }

    /// Stack rank-4 tensors along the batch axis.
    pub fn stack_batch(items: &[Tensor<T>]) -> Result<Self> {
        let first = match items.first() {
            Some(t) => t,
            None => return shape_err("stack_batch", "no tensors"),
        };
        let (_, c, h, w) = first.dims4()?;
        let mut n = 0;
        let mut data = Vec::new();
        for t in items {
            let (tn, tc, th, tw) = t.dims4()?;
            if (tc, th, tw) != (c, h, w) {
                return shape_err("stack_batch", format!("{:?} vs {:?}", t.shape, first.shape));
            }
            n += tn;
            data.extend_from_slice(&t.data);
        }
        Self::new(vec![n, c, h, w], data)
    }

    /// Bit-level digest of the contents, used for lock-step comparisons.
    pub fn digest(&self) -> u64 {
        // FNV-1a over shape and raw bit patterns
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |b: u64| {
            for i in 0..8 {
                h ^= (b >> (8 * i)) & 0xff;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for &s in &self.shape {
            feed(s as u64);
        }
        for v in &self.data {
            feed(v.f64().to_bits());
        }
        h
    }
}

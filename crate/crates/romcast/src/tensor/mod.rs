//! Dense f64 tensors and the reverse-mode differentiation graph built on them.
//!
//! The tensor layout is row-major with the last axis fastest. Convolutional
//! operations expect NCHW batches; see [`OpKind`] for the shape rule of every
//! primitive.

mod adam;
mod graph;
mod ops;

pub use adam::{AdamConfig, AdamState};
pub use graph::{Gradients, Graph, NodeId};
pub use ops::{eval, OpKind};

use crate::error::{Error, Result};
use rand::Rng;

/// Dense N-dimensional array of f64 values.
///
/// Invariants: every extent is positive and `data.len()` equals the product
/// of the extents. Both are enforced at construction, so a `Tensor` obtained
/// from any public constructor is structurally valid.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() || shape.iter().any(|&e| e == 0) {
            return Err(Error::shape(
                "tensor",
                format!("extents must be positive, got {:?}", shape),
            ));
        }
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::shape(
                "tensor",
                format!(
                    "shape {:?} implies {} elements but {} were supplied",
                    shape,
                    numel,
                    data.len()
                ),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    /// Rank-1 tensor of a single element.
    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..numel).map(|i| f(i)).collect(),
        }
    }

    /// Samples every element from U(-bound, bound). Draw order is the flat
    /// element order, so a fixed RNG state reproduces the tensor bit-exactly.
    pub fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| rng.gen_range(-bound..bound))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Returns a copy with a new shape holding the same elements.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) || numel != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape, shape),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Element offset for a 4-D index. Debug-checked against the extents.
    #[inline]
    pub fn offset4(&self, b: usize, c: usize, h: usize, w: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 4);
        ((b * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

    #[inline]
    pub fn at4(&self, b: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.offset4(b, c, h, w)]
    }

    pub fn add_in_place(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "add_in_place",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += *b;
        }
        Ok(())
    }
}

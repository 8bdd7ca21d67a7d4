//! Dense f64 tensors and reverse-mode automatic differentiation.
//!
//! The engine is deliberately small: a [`Tape`] records operations executed
//! on [`Var`] handles whenever a gradient-requiring input is involved, and
//! [`Tape::backward`] replays the record once in reverse. Complex values are
//! represented as pairs of real tensors ([`CVar`]), so every gradient is a
//! plain real derivative and all losses are real scalars.
//!
//! Everything is f64 and single-threaded; tapes are per-evaluation objects
//! that are dropped after `backward`.

mod complex;
mod conv;
mod finite;
mod optim;
mod tape;

pub use complex::{dft_matrix, CVar};
pub use finite::finite_diff;
pub use optim::{AdamState, OptimError};
pub use tape::{Gradients, Tape, Var};

/// A dense row-major f64 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor from raw parts. Panics if `data.len()` does not match
    /// the product of `shape`.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            data.len(),
            numel,
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel] }
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![1.0; numel] }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![value; numel] }
    }

    /// A rank-1 tensor holding a single scalar.
    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// The scalar value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Reinterprets the same data under a new shape with equal element count.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(self.numel(), numel, "reshape {:?} -> {:?}", self.shape, shape);
        self.shape = shape;
        self
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }
}

/// Row-major strides for a shape.
pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        strides[d] = acc;
        acc *= shape[d];
    }
    strides
}

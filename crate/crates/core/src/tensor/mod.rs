//! Dense tensors, a reverse-mode tape, loss kernels and the optimizer.
//!
//! Values live in [`Tensor`]; differentiable computation is recorded on a
//! [`Tape`] whose nodes are addressed by [`Var`] handles. Training runs in
//! `f32`; the gradient-check suites run the same code in `f64`.

mod loss;
mod optim;
mod scalar;
mod tape;

pub use optim::{clip_grad_norm, global_norm, AdamW, AdamWConfig};
pub use scalar::Scalar;
pub use tape::{Tape, Var};

use crate::error::{dim_err, Result};

/// Row-major dense array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return dim_err(format!(
                "shape {shape:?} must be non-empty with positive dims"
            ));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return dim_err(format!(
                "shape {shape:?} holds {numel} elements but buffer has {}",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: F) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Builds a tensor from `f64` values, converting to the element type.
    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(
            shape.to_vec(),
            values.iter().map(|&v| F::from_f64(v)).collect(),
        )
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of the trailing dimension.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor rank >= 1")
    }

    /// Number of rows when every leading dimension is flattened.
    pub fn rows(&self) -> usize {
        self.numel() / self.last_dim()
    }

    /// Same buffer under a new shape with the same element count.
    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data)
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> F {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::from_f64(v.as_f64())).collect(),
        }
    }
}

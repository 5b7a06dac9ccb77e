//! Dense `f32` tensors and reverse-mode differentiation.
//!
//! [`Tensor`] is a flat row-major buffer plus a shape. All network math runs
//! through either the pure functions in this module (forward only) or a
//! [`GradientTape`], which records executed operations and replays them in
//! exact reverse order to produce gradients for every recorded input.

mod ops;
mod tape;

pub use ops::{
    avg_pool2d, bilinear_upsample, concat_channels, conv2d, depthwise_conv2d, fully_connected,
    global_avg_pool, max_pool2d, relu, sigmoid, sigmoid_bce,
};
pub use tape::{BnMode, BnState, GradientTape, Gradients, NodeId};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("batch norm inference requires initialized running statistics")]
    UninitializedBatchNorm,

    #[error("upsample target {target:?} is smaller than source {from:?}")]
    UpsampleTarget {
        from: (usize, usize),
        target: (usize, usize),
    },

    #[error("index {index} out of bounds for {len} elements")]
    IndexOutOfBounds { index: usize, len: usize },
}

/// Dense n-dimensional array of 32-bit floats in row-major order.
///
/// `product(shape) == data.len()` always holds; every dimension is positive.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self, TensorError> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::InvalidShape(format!(
                "dimensions must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::InvalidShape(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "dimensions must be positive");
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; numel] }
    }

    /// Scalar tensor of shape `[1]`.
    pub fn scalar(value: f32) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a scalar tensor. Panics when the tensor has more than one
    /// element.
    pub fn item(&self) -> f32 {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Same buffer under a new shape with identical element count.
    pub fn reshape(self, shape: &[usize]) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) || numel != self.data.len() {
            return Err(TensorError::InvalidShape(format!(
                "cannot reshape {} elements to {shape:?}",
                self.data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

//! Dense f64 tensors with explicit shapes.
//!
//! Activations are rank-4 `(N, C, H, W)`; parameters use whatever rank fits
//! (conv kernels rank 4, linear weights rank 2, per-channel vectors rank 1).
//! Data is row-major with the last axis fastest.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};

/// Tensor shape; rank 1 through 4.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Shape(pub Vec<usize>);

impl Shape {
    pub fn scalar() -> Self {
        Shape(vec![1])
    }

    pub fn nchw(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape(vec![n, c, h, w])
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    /// Total element count.
    pub fn len(&self) -> usize {
        self.0.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Batch dimension of an activation shape.
    pub fn n(&self) -> usize {
        self.0[0]
    }

    pub fn c(&self) -> usize {
        self.0[1]
    }

    pub fn h(&self) -> usize {
        self.0[2]
    }

    pub fn w(&self) -> usize {
        self.0[3]
    }

    pub fn describe(&self) -> String {
        format!("{:?}", self.0)
    }
}

impl From<&[usize]> for Shape {
    fn from(dims: &[usize]) -> Self {
        Shape(dims.to_vec())
    }
}

/// A plain tensor value: shape plus row-major data. Used for datasets,
/// parameter storage, and anything living outside a tape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Shape,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        let len = shape.len();
        Tensor {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        let len = shape.len();
        Tensor {
            shape,
            data: vec![value; len],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if shape.len() != data.len() {
            return Err(CoreError::ShapeMismatch(format!(
                "tensor data length {} does not match shape {}",
                data.len(),
                shape.describe()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_len_and_accessors() {
        let s = Shape::nchw(2, 3, 4, 5);
        assert_eq!(s.len(), 120);
        assert_eq!((s.n(), s.c(), s.h(), s.w()), (2, 3, 4, 5));
    }

    #[test]
    fn from_vec_rejects_length_mismatch() {
        let err = Tensor::from_vec(Shape(vec![2, 2]), vec![1.0; 3]).unwrap_err();
        assert!(matches!(err, CoreError::ShapeMismatch(_)));
    }

    #[test]
    fn zeros_are_finite() {
        assert!(Tensor::zeros(Shape::nchw(1, 1, 2, 2)).all_finite());
    }
}

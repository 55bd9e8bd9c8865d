//! Shape-carrying dense tensors over three element domains: real f32
//! (`TensorF`), quantized integers (`TensorQ`), and int32 accumulators
//! (`TensorAcc`). All tensors are row-major, contiguous, and immutable
//! after construction.

mod blob;
mod conv;

pub use blob::{read_blob, write_blob, Blob, DTYPE_F32, DTYPE_I32, DTYPE_I8};
pub use conv::{conv2d_f32, conv2d_int, conv2d_int_padded};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Dimensions of a dense tensor. NCHW convention for 4-D, `[rows, cols]`
/// for 2-D.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape(pub Vec<usize>);

impl Shape {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::InvalidShape {
                context: "shape must have at least one dimension".into(),
            });
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidShape {
                context: format!("all dims must be >= 1, got {dims:?}"),
            });
        }
        Ok(Shape(dims))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn len(&self) -> usize {
        self.0.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false // every dim >= 1 by construction
    }

    /// Destructure a 4-D shape as (n, c, h, w).
    pub fn nchw(&self) -> Result<(usize, usize, usize, usize)> {
        match self.0.as_slice() {
            &[n, c, h, w] => Ok((n, c, h, w)),
            other => Err(Error::InvalidShape {
                context: format!("expected rank-4 NCHW shape, got {other:?}"),
            }),
        }
    }

    /// Destructure a 2-D shape as (rows, cols).
    pub fn rc(&self) -> Result<(usize, usize)> {
        match self.0.as_slice() {
            &[r, c] => Ok((r, c)),
            other => Err(Error::InvalidShape {
                context: format!("expected rank-2 shape, got {other:?}"),
            }),
        }
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

/// Real-zone tensor: finite f32 values. NaN and infinity are rejected at
/// construction so downstream arithmetic never has to re-check.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorF {
    shape: Shape,
    data: Vec<f32>,
}

impl TensorF {
    pub fn new(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if shape.len() != data.len() {
            return Err(Error::ShapeMismatch {
                context: format!(
                    "shape {shape} holds {} elements but data has {}",
                    shape.len(),
                    data.len()
                ),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                index,
                context: format!("value {} in tensor construction", data[index]),
            });
        }
        Ok(TensorF { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        let n = shape.len();
        TensorF {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Shape, value: f32) -> Result<Self> {
        let n = shape.len();
        Self::new(shape, vec![value; n])
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Same data under a new shape with identical element count.
    pub fn reshaped(&self, shape: Shape) -> Result<Self> {
        if shape.len() != self.data.len() {
            return Err(Error::ShapeMismatch {
                context: format!("cannot reshape {} elements into {shape}", self.data.len()),
            });
        }
        Ok(TensorF {
            shape,
            data: self.data.clone(),
        })
    }

    /// Max over |x|; 0 for a tensor of zeros.
    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn min(&self) -> f32 {
        self.data.iter().fold(f32::INFINITY, |m, &v| m.min(v))
    }

    pub fn max(&self) -> f32 {
        self.data.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v))
    }
}

/// Quantized-zone tensor. Values are integer codes within a declared
/// `[lo, hi]` range; storage is widened to i16 so an unsigned 8-bit code
/// (max 255) fits alongside signed ones.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorQ {
    shape: Shape,
    data: Vec<i16>,
    lo: i32,
    hi: i32,
}

impl TensorQ {
    pub fn new(shape: Shape, data: Vec<i16>, lo: i32, hi: i32) -> Result<Self> {
        if shape.len() != data.len() {
            return Err(Error::ShapeMismatch {
                context: format!(
                    "shape {shape} holds {} elements but data has {}",
                    shape.len(),
                    data.len()
                ),
            });
        }
        if lo > hi {
            return Err(Error::InvalidShape {
                context: format!("declared range [{lo}, {hi}] is empty"),
            });
        }
        if let Some(&v) = data.iter().find(|&&v| (v as i32) < lo || (v as i32) > hi) {
            return Err(Error::OutOfRange {
                value: v as i32,
                lo,
                hi,
            });
        }
        Ok(TensorQ {
            shape,
            data,
            lo,
            hi,
        })
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn data(&self) -> &[i16] {
        &self.data
    }

    pub fn range(&self) -> (i32, i32) {
        (self.lo, self.hi)
    }

    pub fn reshaped(&self, shape: Shape) -> Result<Self> {
        if shape.len() != self.data.len() {
            return Err(Error::ShapeMismatch {
                context: format!("cannot reshape {} elements into {shape}", self.data.len()),
            });
        }
        Ok(TensorQ {
            shape,
            data: self.data.clone(),
            lo: self.lo,
            hi: self.hi,
        })
    }

    /// Integer codes as exact f32 values (every int8-range code is exactly
    /// representable).
    pub fn to_f32(&self) -> TensorF {
        TensorF {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }
}

/// Accumulator tensor: int32 values produced by integer convolution or
/// matmul. Overflow is a reported error, never a wrap.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorAcc {
    shape: Shape,
    data: Vec<i32>,
}

impl TensorAcc {
    pub fn new(shape: Shape, data: Vec<i32>) -> Result<Self> {
        if shape.len() != data.len() {
            return Err(Error::ShapeMismatch {
                context: format!(
                    "shape {shape} holds {} elements but data has {}",
                    shape.len(),
                    data.len()
                ),
            });
        }
        Ok(TensorAcc { shape, data })
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn data(&self) -> &[i32] {
        &self.data
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_rejects_zero_dim() {
        assert!(Shape::new(vec![1, 0, 3]).is_err());
        assert!(Shape::new(vec![]).is_err());
        assert_eq!(Shape::new(vec![2, 3]).unwrap().len(), 6);
    }

    #[test]
    fn tensorf_rejects_non_finite() {
        let s = Shape::new(vec![3]).unwrap();
        let err = TensorF::new(s.clone(), vec![1.0, f32::NAN, 2.0]).unwrap_err();
        assert_eq!(err.code(), "tensor/non-finite");
        let err = TensorF::new(s, vec![1.0, 2.0, f32::INFINITY]).unwrap_err();
        assert_eq!(err.code(), "tensor/non-finite");
    }

    #[test]
    fn tensorf_rejects_length_mismatch() {
        let s = Shape::new(vec![4]).unwrap();
        assert!(TensorF::new(s, vec![1.0; 3]).is_err());
    }

    #[test]
    fn tensorq_enforces_declared_range() {
        let s = Shape::new(vec![2]).unwrap();
        assert!(TensorQ::new(s.clone(), vec![-127, 127], -127, 127).is_ok());
        let err = TensorQ::new(s, vec![-128, 0], -127, 127).unwrap_err();
        assert_eq!(err.code(), "tensor/out-of-range");
    }

    #[test]
    fn max_abs_of_zeros_is_zero() {
        let t = TensorF::zeros(Shape::new(vec![2, 2]).unwrap());
        assert_eq!(t.max_abs(), 0.0);
    }
}

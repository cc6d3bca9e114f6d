//! Dense tensors and the small set of differentiable kernels the tracker
//! needs: valid-padding conv2d, ReLU, cross-correlation, bicubic resize,
//! a weighted binary cross-entropy loss, Adam, and a binary checkpoint
//! container. Everything computes in f64; checkpoints store f32.

pub mod adam;
pub mod bicubic;
pub mod checkpoint;
pub mod conv;
pub mod correlate;
pub mod graph;
pub mod loss;

use crate::error::{Error, Result};

/// Row-major dense f64 tensor. The last axis is contiguous; images are
/// `[channels, rows, cols]`, 2D maps `[rows, cols]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_shape_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// 2D accessor, `[rows, cols]`.
    #[inline]
    pub fn at2(&self, r: usize, c: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[r * self.shape[1] + c]
    }

    #[inline]
    pub fn set2(&mut self, r: usize, c: usize, v: f64) {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[r * self.shape[1] + c] = v;
    }

    /// 3D accessor, `[channels, rows, cols]`.
    #[inline]
    pub fn at3(&self, ch: usize, r: usize, c: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 3);
        self.data[(ch * self.shape[1] + r) * self.shape[2] + c]
    }

    #[inline]
    pub fn set3(&mut self, ch: usize, r: usize, c: usize, v: f64) {
        debug_assert_eq!(self.shape.len(), 3);
        self.data[(ch * self.shape[1] + r) * self.shape[2] + c] = v;
    }

    /// Index of the largest value, ties broken toward the smallest flat
    /// index (row-major: smallest row, then smallest column).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        let mut best_v = f64::NEG_INFINITY;
        for (i, &v) in self.data.iter().enumerate() {
            if v > best_v {
                best_v = v;
                best = i;
            }
        }
        best
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    /// `self + scale * other`, shapes must match.
    pub fn add_scaled(&mut self, other: &Tensor, scale: f64) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "add_scaled shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += scale * b;
        }
        Ok(())
    }

    /// In-place convex blend toward `other`: `self = (1 - t) * self + t * other`.
    pub fn blend_toward(&mut self, other: &Tensor, t: f64) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "blend shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a = (1.0 - t) * *a + t * b;
        }
        Ok(())
    }
}

//! Dense row-major tensor of `f32`, the carrier for features, distributions
//! and grids throughout the crate.
//!
//! Indexing is always row-major (last axis fastest), which is also the
//! on-disk layout of the LXT container, so serialization is a plain memcpy.

use crate::error::{shape_mismatch, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// All-zero tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Tensor {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    /// Tensor filled with a constant.
    pub fn full(shape: &[usize], value: f32) -> Tensor {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    /// Wrap an existing buffer. The buffer length must match the shape.
    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(shape_mismatch(
                "Tensor::from_vec",
                format!("{} elements for shape {:?}", len, shape),
                format!("{} elements", data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    /// Flat offset of a multi-index. Panics on rank or bounds violations;
    /// indexing bugs are programming errors, not data errors.
    #[inline]
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut off = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            debug_assert!(ix < dim, "index {} out of bounds on axis {}", ix, i);
            off = off * dim + ix;
        }
        off
    }

    #[inline]
    pub fn at(&self, index: &[usize]) -> f32 {
        self.data[self.offset(index)]
    }

    #[inline]
    pub fn at_mut(&mut self, index: &[usize]) -> &mut f32 {
        let off = self.offset(index);
        &mut self.data[off]
    }

    /// Contiguous slice of the last axis at the given leading index.
    /// `index` must have rank − 1 entries.
    #[inline]
    pub fn row(&self, index: &[usize]) -> &[f32] {
        let last = *self.shape.last().expect("row() on rank-0 tensor");
        debug_assert_eq!(index.len() + 1, self.shape.len());
        let mut off = 0;
        for (&ix, &dim) in index.iter().zip(&self.shape) {
            off = off * dim + ix;
        }
        &self.data[off * last..(off + 1) * last]
    }

    #[inline]
    pub fn row_mut(&mut self, index: &[usize]) -> &mut [f32] {
        let last = *self.shape.last().expect("row_mut() on rank-0 tensor");
        debug_assert_eq!(index.len() + 1, self.shape.len());
        let mut off = 0;
        for (&ix, &dim) in index.iter().zip(&self.shape) {
            off = off * dim + ix;
        }
        &mut self.data[off * last..(off + 1) * last]
    }

    /// True if every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Error unless every element is finite. `stage` names the pipeline
    /// stage for the CLI's numerical-failure exit code.
    pub fn check_finite(&self, stage: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(stage.to_string()))
        }
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Tensor> {
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(shape_mismatch(
                "Tensor::reshape",
                format!("{} elements", self.data.len()),
                format!("shape {:?} = {} elements", shape, len),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }
}

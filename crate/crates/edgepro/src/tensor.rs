//! Dense row-major tensor of `f64` values.
//!
//! Dimension 0 is the batch dimension for anything that flows through a
//! network. Shapes are explicit; there is no broadcasting.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let len = shape.iter().product();
        Tensor {
            shape,
            values: vec![0.0; len],
        }
    }

    /// Builds a tensor from raw values, checking that the element count
    /// matches the shape product.
    pub fn from_vec(shape: impl Into<Vec<usize>>, values: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let expect: usize = shape.iter().product();
        if values.len() != expect {
            return Err(Error::InvalidParam(format!(
                "tensor shape {:?} wants {} values, got {}",
                shape,
                expect,
                values.len()
            )));
        }
        Ok(Tensor { shape, values })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Number of entries along dimension 0, or 0 for a rank-0 tensor.
    pub fn batch_size(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Elements per dimension-0 entry.
    pub fn row_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    /// Slice of the values belonging to dimension-0 entry `b`.
    pub fn row(&self, b: usize) -> &[f64] {
        let n = self.row_len();
        &self.values[b * n..(b + 1) * n]
    }

    pub fn row_mut(&mut self, b: usize) -> &mut [f64] {
        let n = self.row_len();
        &mut self.values[b * n..(b + 1) * n]
    }

    /// Reinterprets the values under a new shape with the same element count.
    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let expect: usize = shape.iter().product();
        if expect != self.values.len() {
            return Err(Error::InvalidParam(format!(
                "cannot reshape {} values to {:?}",
                self.values.len(),
                shape
            )));
        }
        Ok(Tensor {
            shape,
            values: self.values,
        })
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Scales every value in place.
    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.values {
            *v *= factor;
        }
    }
}

/// Stacks per-example tensors of identical shape into one batch tensor.
pub fn stack(examples: &[&Tensor]) -> Result<Tensor> {
    let first = examples
        .first()
        .ok_or_else(|| Error::InvalidParam("cannot stack zero tensors".into()))?;
    let mut shape = vec![examples.len()];
    shape.extend_from_slice(first.shape());
    let mut values = Vec::with_capacity(examples.len() * first.len());
    for ex in examples {
        if ex.shape() != first.shape() {
            return Err(Error::InvalidParam(format!(
                "stack shape mismatch: {:?} vs {:?}",
                ex.shape(),
                first.shape()
            )));
        }
        values.extend_from_slice(ex.values());
    }
    Tensor::from_vec(shape, values)
}

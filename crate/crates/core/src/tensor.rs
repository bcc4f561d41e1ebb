//! Row-major f32 tensors.
//!
//! Values are stored in 32-bit floats; reductions that feed numerical
//! decisions (means, dot products) accumulate in f64 and round once.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Build a tensor from raw data. The data length must match the shape
    /// product and every value must be finite.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        check_shape(&shape)?;
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::ShapeMismatch { expected: shape, got: vec![data.len()] });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite tensor value"));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        check_shape(&shape)?;
        let n = shape.iter().product();
        Ok(Self { shape, data: vec![0.0; n] })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Errors unless `other` has the same shape.
    pub fn expect_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                expected: self.shape.clone(),
                got: other.shape.clone(),
            });
        }
        Ok(())
    }

    /// Elementwise `a*self + b*other`.
    pub fn scale_add(&self, a: f32, other: &Tensor, b: f32) -> Result<Tensor> {
        self.expect_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&x, &y)| a * x + b * y)
            .collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn clamped(&self, lo: f32, hi: f32) -> Tensor {
        self.map(|v| v.clamp(lo, hi))
    }

    /// Mean of all elements, accumulated in f64.
    pub fn mean(&self) -> f32 {
        if self.data.is_empty() {
            return 0.0;
        }
        let s: f64 = self.data.iter().map(|&v| v as f64).sum();
        (s / self.data.len() as f64) as f32
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return Err(Error::EmptyShape);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_empty_shape() {
        assert!(matches!(Tensor::zeros(vec![]), Err(Error::EmptyShape)));
        assert!(matches!(Tensor::zeros(vec![3, 0]), Err(Error::EmptyShape)));
    }

    #[test]
    fn rejects_length_mismatch() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn rejects_non_finite() {
        assert!(Tensor::new(vec![2], vec![1.0, f32::NAN]).is_err());
        assert!(Tensor::new(vec![2], vec![1.0, f32::INFINITY]).is_err());
    }

    #[test]
    fn scale_add_elementwise() {
        let a = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let b = Tensor::new(vec![3], vec![10.0, 20.0, 30.0]).unwrap();
        let c = a.scale_add(2.0, &b, 0.5).unwrap();
        assert_eq!(c.data(), &[7.0, 14.0, 21.0]);
    }

    #[test]
    fn scale_add_shape_mismatch() {
        let a = Tensor::zeros(vec![2]).unwrap();
        let b = Tensor::zeros(vec![3]).unwrap();
        assert!(a.scale_add(1.0, &b, 1.0).is_err());
    }
}

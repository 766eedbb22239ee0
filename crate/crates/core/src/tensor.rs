//! Dense row-major tensor used for volumes, feature maps and parameters.
//!
//! Storage is `f64`. Four-dimensional tensors are laid out as
//! `[channels, depth, height, width]` with width varying fastest.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor from a shape and a buffer. Rejects zero extents,
    /// length mismatches and non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        check_shape(&shape)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} needs {n} values, buffer has {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite value at index {i}")));
        }
        Ok(Tensor { shape, data })
    }

    /// Internal constructor for kernels whose shape arithmetic is already checked.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(shape.iter().all(|&e| e >= 1), "zero extent in {shape:?}");
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let mut t = Self::zeros(shape);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Interprets the tensor as `[C, D, H, W]`.
    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape[..] {
            [c, d, h, w] => Ok([c, d, h, w]),
            _ => Err(Error::invalid(format!(
                "expected a 4-D [C,D,H,W] tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        check_shape(shape)?;
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::ShapeMismatch {
                expected: self.shape.clone(),
                found: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.expect_same_shape(other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn expect_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                expected: self.shape.clone(),
                found: other.shape.clone(),
            });
        }
        Ok(())
    }

    /// Sum with 64-bit sequential accumulation.
    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Single channel `c` of a 4-D tensor as a `[1, D, H, W]` tensor.
    pub fn channel(&self, c: usize) -> Result<Tensor> {
        let [nc, d, h, w] = self.dims4()?;
        if c >= nc {
            return Err(Error::invalid(format!("channel {c} out of range 0..{nc}")));
        }
        let n = d * h * w;
        Ok(Tensor::from_raw(
            vec![1, d, h, w],
            self.data[c * n..(c + 1) * n].to_vec(),
        ))
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() {
        return Err(Error::invalid("tensor shape must have at least one axis"));
    }
    if shape.contains(&0) {
        return Err(Error::invalid(format!("zero extent in shape {shape:?}")));
    }
    Ok(())
}

/// A value together with the gradient of some scalar with respect to it.
#[derive(Debug, Clone, PartialEq)]
pub struct GradPair {
    value: Tensor,
    gradient: Tensor,
}

impl GradPair {
    pub fn new(value: Tensor, gradient: Tensor) -> Result<Self> {
        value.expect_same_shape(&gradient)?;
        Ok(GradPair { value, gradient })
    }

    /// Pairs `value` with a zero gradient.
    pub fn detached(value: Tensor) -> Self {
        let gradient = Tensor::zeros(value.shape());
        GradPair { value, gradient }
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn gradient(&self) -> &Tensor {
        &self.gradient
    }

    pub fn accumulate(&mut self, grad: &Tensor) -> Result<()> {
        self.gradient.expect_same_shape(grad)?;
        self.gradient.add_assign(grad);
        Ok(())
    }

    pub fn into_parts(self) -> (Tensor, Tensor) {
        (self.value, self.gradient)
    }
}

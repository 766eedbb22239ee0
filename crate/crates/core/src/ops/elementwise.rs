//! Elementwise kernels and their vector-Jacobian products. Backward
//! functions take the forward inputs (or outputs, where cheaper) plus the
//! upstream gradient. At the kinks of `abs` and `relu` the subgradient 0 is
//! used.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, |x, y| x + y)
}

/// Returns `(grad_a, grad_b)`.
pub fn add_backward(upstream: &Tensor) -> (Tensor, Tensor) {
    (upstream.clone(), upstream.clone())
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, |x, y| x * y)
}

/// Returns `(grad_a, grad_b)` = `(g * b, g * a)`.
pub fn mul_backward(a: &Tensor, b: &Tensor, upstream: &Tensor) -> Result<(Tensor, Tensor)> {
    a.expect_same_shape(upstream)?;
    Ok((
        upstream.zip_map(b, |g, y| g * y)?,
        upstream.zip_map(a, |g, x| g * x)?,
    ))
}

pub fn tanh(x: &Tensor) -> Tensor {
    x.map(f64::tanh)
}

/// Takes the forward *output* `y = tanh(x)`.
pub fn tanh_backward(output: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    upstream.zip_map(output, |g, y| g * (1.0 - y * y))
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Takes the forward *output* `s = sigmoid(x)`.
pub fn sigmoid_backward(output: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    upstream.zip_map(output, |g, s| g * s * (1.0 - s))
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn relu_backward(input: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    upstream.zip_map(input, |g, x| if x > 0.0 { g } else { 0.0 })
}

pub fn abs(x: &Tensor) -> Tensor {
    x.map(f64::abs)
}

pub fn abs_backward(input: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    upstream.zip_map(input, |g, x| g * sign0(x))
}

pub fn square(x: &Tensor) -> Tensor {
    x.map(|v| v * v)
}

pub fn square_backward(input: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    upstream.zip_map(input, |g, x| 2.0 * x * g)
}

/// `signum` with `sign(0) = 0`.
pub(crate) fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Concatenates `[Ca,D,H,W]` and `[Cb,D,H,W]` into `[Ca+Cb,D,H,W]`.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [ca, d, h, w] = a.dims4()?;
    let [cb, d2, h2, w2] = b.dims4()?;
    if (d, h, w) != (d2, h2, w2) {
        return Err(Error::ShapeMismatch {
            expected: vec![cb, d, h, w],
            found: b.shape().to_vec(),
        });
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Ok(Tensor::from_raw(vec![ca + cb, d, h, w], data))
}

/// Splits a `[C,D,H,W]` tensor after `first` channels; the adjoint of
/// [`concat_channels`].
pub fn split_channels(x: &Tensor, first: usize) -> Result<(Tensor, Tensor)> {
    let [c, d, h, w] = x.dims4()?;
    if first == 0 || first >= c {
        return Err(Error::invalid(format!(
            "cannot split {c} channels after {first}"
        )));
    }
    let n = d * h * w;
    let (lo, hi) = x.data().split_at(first * n);
    Ok((
        Tensor::from_raw(vec![first, d, h, w], lo.to_vec()),
        Tensor::from_raw(vec![c - first, d, h, w], hi.to_vec()),
    ))
}

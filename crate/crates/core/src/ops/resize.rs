//! Trilinear resampling with the corner-aligned convention: the first and
//! last samples of the input and output grids coincide, so output index
//! `o` reads source coordinate `o * (n_in - 1) / (n_out - 1)`. A single
//! output sample reads source coordinate 0.
//!
//! The resize is separable (width, then height, then depth) and every 1-D
//! step is written as `a + t * (b - a)`, so constant fields are reproduced
//! bit-exactly.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    t: f64,
}

fn taps(n_in: usize, n_out: usize) -> Vec<Tap> {
    (0..n_out)
        .map(|o| {
            let src = if n_out == 1 || n_in == 1 {
                0.0
            } else {
                (o * (n_in - 1)) as f64 / (n_out - 1) as f64
            };
            let lo = (src.floor() as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            Tap {
                lo,
                hi,
                t: src - lo as f64,
            }
        })
        .collect()
}

/// Resizes the middle axis of a buffer viewed as `[outer, n_in, inner]`.
fn resize_axis(src: &[f64], outer: usize, n_in: usize, inner: usize, n_out: usize) -> Vec<f64> {
    if n_in == n_out {
        return src.to_vec();
    }
    let taps = taps(n_in, n_out);
    let mut dst = vec![0.0; outer * n_out * inner];
    for o in 0..outer {
        let s = &src[o * n_in * inner..(o + 1) * n_in * inner];
        let d = &mut dst[o * n_out * inner..(o + 1) * n_out * inner];
        for (j, tap) in taps.iter().enumerate() {
            let a = &s[tap.lo * inner..(tap.lo + 1) * inner];
            let b = &s[tap.hi * inner..(tap.hi + 1) * inner];
            for ((out, &av), &bv) in d[j * inner..(j + 1) * inner].iter_mut().zip(a).zip(b) {
                *out = av + tap.t * (bv - av);
            }
        }
    }
    dst
}

/// Adjoint of [`resize_axis`].
fn resize_axis_adjoint(
    grad: &[f64],
    outer: usize,
    n_in: usize,
    inner: usize,
    n_out: usize,
) -> Vec<f64> {
    if n_in == n_out {
        return grad.to_vec();
    }
    let taps = taps(n_in, n_out);
    let mut dst = vec![0.0; outer * n_in * inner];
    for o in 0..outer {
        let g = &grad[o * n_out * inner..(o + 1) * n_out * inner];
        let d = &mut dst[o * n_in * inner..(o + 1) * n_in * inner];
        for (j, tap) in taps.iter().enumerate() {
            let gj = &g[j * inner..(j + 1) * inner];
            for (k, &gv) in gj.iter().enumerate() {
                d[tap.lo * inner + k] += (1.0 - tap.t) * gv;
                d[tap.hi * inner + k] += tap.t * gv;
            }
        }
    }
    dst
}

fn check_target(target: [usize; 3]) -> Result<()> {
    if target.contains(&0) {
        return Err(Error::invalid(format!(
            "resize target extents must be >= 1, got {target:?}"
        )));
    }
    Ok(())
}

pub fn trilinear_resize(input: &Tensor, target: [usize; 3]) -> Result<Tensor> {
    check_target(target)?;
    let [c, d, h, w] = input.dims4()?;
    let [td, th, tw] = target;
    let x = resize_axis(input.data(), c * d * h, w, 1, tw);
    let x = resize_axis(&x, c * d, h, tw, th);
    let x = resize_axis(&x, c, d, th * tw, td);
    Ok(Tensor::from_raw(vec![c, td, th, tw], x))
}

/// Gradient of [`trilinear_resize`] with respect to its input; `input_shape`
/// is the `[C, D, H, W]` shape of the forward input.
pub fn trilinear_resize_backward(input_shape: [usize; 4], upstream: &Tensor) -> Result<Tensor> {
    let [c, d, h, w] = input_shape;
    let [uc, td, th, tw] = upstream.dims4()?;
    if uc != c {
        return Err(Error::ShapeMismatch {
            expected: vec![c, td, th, tw],
            found: upstream.shape().to_vec(),
        });
    }
    let g = resize_axis_adjoint(upstream.data(), c, d, th * tw, td);
    let g = resize_axis_adjoint(&g, c * d, h, tw, th);
    let g = resize_axis_adjoint(&g, c * d * h, w, 1, tw);
    Ok(Tensor::from_raw(vec![c, d, h, w], g))
}

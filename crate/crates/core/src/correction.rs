//! Homogeneity correction and the end-to-end zero-shot pipeline.
//!
//! One refinement step maps intensity `I` in `[0, 1]` to
//! `I + alpha * I * (1 - I)` with a per-voxel `alpha` in `[-1, 1]`. The step
//! keeps `[0, 1]` invariant (its output lies between `I^2` and `2I - I^2`),
//! fixes 0 and 1, and is the identity when `alpha = 0`. The same map is
//! applied `n` times.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{LossBreakdown, LossWeights};
use crate::network::{self, Architecture, NetworkParams};
use crate::ops;
use crate::optimizer::{self, VolumeContext};
use crate::tensor::Tensor;
use crate::volume::{Datatype, Volume};

/// Lower and upper clipping percentiles used by [`normalize`].
pub const CLIP_PERCENTILES: (f64, f64) = (0.5, 99.5);

/// Extents below this trigger a warning in [`correct_volume`].
pub const SMALL_EXTENT: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub low: f64,
    pub high: f64,
    pub original_dtype: Datatype,
}

/// Linear-interpolated percentile of an already sorted slice.
fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let t = pos - lo as f64;
    sorted[lo] + t * (sorted[hi] - sorted[lo])
}

/// Clips at the 0.5th and 99.5th percentiles and maps `[low, high]` onto
/// `[0, 1]`. Falls back to the min/max range when the percentiles coincide.
pub fn normalize(volume: &Volume) -> Result<(Tensor, NormStats)> {
    let mut sorted = volume.data.data().to_vec();
    sorted.sort_by(f64::total_cmp);
    let (min, max) = (sorted[0], sorted[sorted.len() - 1]);
    if min == max {
        return Err(Error::DegenerateInput(format!(
            "volume is constant ({min}); nothing to correct"
        )));
    }
    let mut low = percentile_sorted(&sorted, CLIP_PERCENTILES.0);
    let mut high = percentile_sorted(&sorted, CLIP_PERCENTILES.1);
    if high <= low {
        low = min;
        high = max;
    }
    let stats = NormStats {
        low,
        high,
        original_dtype: volume.dtype,
    };
    let span = high - low;
    let unit = volume.data.map(|v| ((v - low) / span).clamp(0.0, 1.0));
    Ok((unit, stats))
}

/// Inverse of the affine part of [`normalize`]; clipped tails stay clipped.
pub fn denormalize(unit: &Tensor, stats: &NormStats) -> Tensor {
    let span = stats.high - stats.low;
    unit.map(|v| stats.low + v * span)
}

fn check_hc_inputs(image: &Tensor, alpha: &Tensor) -> Result<()> {
    image.expect_same_shape(alpha)?;
    if let Some(v) = image.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid(format!("intensity {v} outside [0, 1]")));
    }
    if let Some(a) = alpha.data().iter().find(|a| !(-1.0..=1.0).contains(*a)) {
        return Err(Error::invalid(format!("alpha {a} outside [-1, 1]")));
    }
    Ok(())
}

#[inline]
fn hc_scalar(i: f64, a: f64) -> f64 {
    i + a * i * (1.0 - i)
}

/// One refinement step, `I + alpha * I * (1 - I)`.
pub fn hc_step(image: &Tensor, alpha: &Tensor) -> Result<Tensor> {
    check_hc_inputs(image, alpha)?;
    image.zip_map(alpha, hc_scalar)
}

/// `n` refinement steps with the same `alpha` map.
pub fn hc_iterate(image: &Tensor, alpha: &Tensor, n: usize) -> Result<Tensor> {
    check_hc_inputs(image, alpha)?;
    if n == 0 {
        return Err(Error::invalid("hc iteration count must be >= 1"));
    }
    Ok(HcTrace::run(image, alpha, n).output().clone())
}

/// Gradients of `sum(upstream * hc_iterate(image, alpha, n))` with respect to
/// `(image, alpha)`.
pub fn hc_iterate_backward(
    image: &Tensor,
    alpha: &Tensor,
    n: usize,
    upstream: &Tensor,
) -> Result<(Tensor, Tensor)> {
    check_hc_inputs(image, alpha)?;
    if n == 0 {
        return Err(Error::invalid("hc iteration count must be >= 1"));
    }
    image.expect_same_shape(upstream)?;
    Ok(HcTrace::run(image, alpha, n).backward(alpha, upstream))
}

/// Every intermediate image of an `n`-step refinement, kept for backprop.
pub(crate) struct HcTrace {
    states: Vec<Tensor>,
}

impl HcTrace {
    pub(crate) fn run(image: &Tensor, alpha: &Tensor, n: usize) -> Self {
        let mut states = Vec::with_capacity(n + 1);
        states.push(image.clone());
        for _ in 0..n {
            let prev = states.last().expect("non-empty");
            let next = Tensor::from_raw(
                prev.shape().to_vec(),
                prev.data()
                    .iter()
                    .zip(alpha.data())
                    .map(|(&i, &a)| hc_scalar(i, a))
                    .collect(),
            );
            states.push(next);
        }
        HcTrace { states }
    }

    pub(crate) fn output(&self) -> &Tensor {
        self.states.last().expect("non-empty")
    }

    pub(crate) fn backward(&self, alpha: &Tensor, upstream: &Tensor) -> (Tensor, Tensor) {
        let mut g = upstream.data().to_vec();
        let mut ga = vec![0.0; g.len()];
        for prev in self.states[..self.states.len() - 1].iter().rev() {
            for ((gv, gav), (&i, &a)) in g
                .iter_mut()
                .zip(ga.iter_mut())
                .zip(prev.data().iter().zip(alpha.data()))
            {
                *gav += *gv * i * (1.0 - i);
                *gv *= 1.0 + a * (1.0 - 2.0 * i);
            }
        }
        let shape = upstream.shape().to_vec();
        (
            Tensor::from_raw(shape.clone(), g),
            Tensor::from_raw(shape, ga),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorrectionConfig {
    pub hc_iterations: usize,
    pub opt_steps: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Apply weight decay directly to the parameters instead of folding it
    /// into the gradient.
    pub decoupled_weight_decay: bool,
    pub downsample_factor: usize,
    pub seed: u64,
    pub architecture: Architecture,
    pub weights: LossWeights,
}

impl Default for CorrectionConfig {
    fn default() -> Self {
        CorrectionConfig {
            hc_iterations: 4,
            opt_steps: 100,
            learning_rate: 0.005,
            weight_decay: 1e-4,
            decoupled_weight_decay: false,
            downsample_factor: 8,
            seed: 0,
            architecture: Architecture::default(),
            weights: LossWeights::default(),
        }
    }
}

impl CorrectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hc_iterations == 0 {
            return Err(Error::invalid("hc_iterations must be >= 1"));
        }
        if self.opt_steps == 0 {
            return Err(Error::invalid("opt_steps must be >= 1"));
        }
        if self.downsample_factor == 0 {
            return Err(Error::invalid("downsample_factor must be >= 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::invalid("learning_rate must be finite and >= 0"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight_decay must be finite and >= 0"));
        }
        self.architecture.validate()?;
        self.weights.validate()
    }

    /// Downsampled grid for a `[D, H, W]` volume: floor division, at least 1.
    pub fn low_resolution(&self, shape: [usize; 3]) -> [usize; 3] {
        shape.map(|e| (e / self.downsample_factor).max(1))
    }
}

#[derive(Debug, Clone)]
pub struct CorrectionResult {
    /// Corrected image in the input's intensity scale and geometry.
    pub corrected: Volume,
    /// Predicted multiplicative bias map at full resolution, in (0, 1).
    pub bias: Volume,
    /// Correction-strength map at full resolution, in (-1, 1).
    pub alpha: Volume,
    /// Loss before each parameter update; one entry per step.
    pub loss_trace: Vec<LossBreakdown>,
    /// Loss of the final parameters.
    pub final_loss: LossBreakdown,
    pub params: NetworkParams,
    pub norm: NormStats,
    pub elapsed_seconds: f64,
    pub config: CorrectionConfig,
    pub warnings: Vec<String>,
}

/// Normalizes, optimizes a freshly initialized network on this volume
/// alone, then applies the refined correction at full resolution.
pub fn correct_volume(volume: &Volume, cfg: &CorrectionConfig) -> Result<CorrectionResult> {
    let start = Instant::now();
    cfg.validate()?;
    let shape = volume.shape();
    let mut warnings = Vec::new();
    if shape.iter().any(|&e| e < SMALL_EXTENT) {
        let msg = format!("volume extent {shape:?} has an axis below {SMALL_EXTENT} voxels");
        log::warn!("{msg}");
        warnings.push(msg);
    }

    let (unit, norm) = normalize(volume)?;
    let [d, h, w] = shape;
    let y = unit.reshape(&[1, d, h, w])?;
    let ctx = VolumeContext::new(y, cfg.low_resolution(shape))?;

    let params = NetworkParams::init(cfg.architecture, cfg.seed)?;
    let (params, loss_trace) = optimizer::optimize(params, &ctx, cfg)?;
    let final_loss = optimizer::evaluate(&params, &ctx, cfg, false)?.breakdown;

    let maps = network::forward(&params, ctx.low())?.upsample(shape)?;
    let refined = HcTrace::run(ctx.full(), &maps.alpha, cfg.hc_iterations)
        .output()
        .clone();
    let corrected = denormalize(&refined, &norm).reshape(&shape)?;
    let bias = maps.bias.reshape(&shape)?;
    let alpha = maps.alpha.reshape(&shape)?;

    let mut corrected = volume.with_data(corrected)?;
    corrected.dtype = Datatype::F32;
    let mut bias = volume.with_data(bias)?;
    bias.dtype = Datatype::F32;
    let mut alpha = volume.with_data(alpha)?;
    alpha.dtype = Datatype::F32;

    Ok(CorrectionResult {
        corrected,
        bias,
        alpha,
        loss_trace,
        final_loss,
        params,
        norm,
        elapsed_seconds: start.elapsed().as_secs_f64(),
        config: *cfg,
        warnings,
    })
}

/// Downsampled copy of a `[1, D, H, W]` image.
pub fn downsample(image: &Tensor, cfg: &CorrectionConfig) -> Result<Tensor> {
    let [_, d, h, w] = image.dims4()?;
    ops::trilinear_resize(image, cfg.low_resolution([d, h, w]))
}

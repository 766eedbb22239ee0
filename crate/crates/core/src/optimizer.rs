//! Adam and the per-volume optimization loop.

use crate::correction::{CorrectionConfig, HcTrace};
use crate::error::{Error, Result};
use crate::losses::{self, LossBreakdown};
use crate::network::{self, NetworkParams};
use crate::ops;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Moment buffers mirror the parameter layout exactly.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: usize,
    pub m: NetworkParams,
    pub v: NetworkParams,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &NetworkParams) -> Self {
        AdamState {
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
            beta1: BETA1,
            beta2: BETA2,
            eps: EPSILON,
        }
    }
}

/// One bias-corrected Adam update. Weight decay is either folded into the
/// gradient (`g + wd * p`, the classical L2 form) or, when `decoupled`,
/// applied to the parameters directly.
pub fn adam_step(
    params: &mut NetworkParams,
    grads: &NetworkParams,
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
    decoupled: bool,
) -> Result<()> {
    let step = state.step + 1;
    if grads.param_count() != params.param_count() {
        return Err(Error::invalid("gradient layout does not match parameters"));
    }
    if !grads.is_finite() {
        return Err(Error::Diverged {
            step,
            detail: "non-finite gradient".into(),
        });
    }
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(step as i32);
    let c2 = 1.0 - b2.powi(step as i32);
    let tensors = params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.m.tensors_mut().into_iter().zip(state.v.tensors_mut()));
    for ((p, g), (m, v)) in tensors {
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
        {
            let g = if decoupled {
                gv
            } else {
                gv + weight_decay * *pv
            };
            *mv = b1 * *mv + (1.0 - b1) * g;
            *vv = b2 * *vv + (1.0 - b2) * g * g;
            let update = lr * (*mv / c1) / ((*vv / c2).sqrt() + eps);
            if decoupled {
                *pv -= lr * weight_decay * *pv;
            }
            *pv -= update;
        }
    }
    state.step = step;
    Ok(())
}

/// Normalized full-resolution image and its downsampled network input.
#[derive(Debug, Clone)]
pub struct VolumeContext {
    full: Tensor,
    low: Tensor,
}

impl VolumeContext {
    /// `full` is `[1, D, H, W]` in `[0, 1]`; `low` is produced by trilinear
    /// resampling to `low_shape`.
    pub fn new(full: Tensor, low_shape: [usize; 3]) -> Result<Self> {
        let [c, ..] = full.dims4()?;
        if c != 1 {
            return Err(Error::invalid("volume context expects a single channel"));
        }
        let low = ops::trilinear_resize(&full, low_shape)?;
        Ok(VolumeContext { full, low })
    }

    pub fn full(&self) -> &Tensor {
        &self.full
    }

    pub fn low(&self) -> &Tensor {
        &self.low
    }

    fn full_shape(&self) -> [usize; 3] {
        let s = self.full.shape();
        [s[1], s[2], s[3]]
    }
}

/// Loss, and optionally its parameter gradient, for one parameter setting.
pub struct Evaluation {
    pub breakdown: LossBreakdown,
    pub grads: Option<NetworkParams>,
    /// Signs of every ReLU pre-activation and absolute-value argument.
    pub kinks: Vec<i8>,
}

/// Forward pass, map upsampling, refinement, composite loss and (when
/// `with_grad`) the full backward pass to the network parameters.
pub fn evaluate(
    params: &NetworkParams,
    ctx: &VolumeContext,
    cfg: &CorrectionConfig,
    with_grad: bool,
) -> Result<Evaluation> {
    let cache = network::forward_cached(params, ctx.low())?;
    let low_maps = cache.maps();
    let maps = low_maps.upsample(ctx.full_shape())?;
    let trace = HcTrace::run(ctx.full(), &maps.alpha, cfg.hc_iterations);
    let hc_out = trace.output();
    let w = &cfg.weights;
    let breakdown = losses::total_loss(ctx.full(), hc_out, &maps.alpha, &maps.bias, w)?;

    let mut kinks = cache.relu_signature();
    kinks.extend(losses::kink_signature(
        ctx.full(),
        hc_out,
        &maps.alpha,
        &maps.bias,
        w,
    )?);

    let grads = if with_grad {
        let tg = losses::total_loss_grad(ctx.full(), hc_out, &maps.alpha, &maps.bias, w)?;
        let (_, g_alpha_hc) = trace.backward(&maps.alpha, &tg.hc_out);
        let g_alpha = tg.alpha.zip_map(&g_alpha_hc, |a, b| a + b)?;
        let low_dims = low_maps.alpha.dims4()?;
        let g_alpha_low = ops::trilinear_resize_backward(low_dims, &g_alpha)?;
        let g_bias_low = ops::trilinear_resize_backward(low_dims, &tg.b_hat)?;
        Some(network::backward(
            params,
            &cache,
            &g_alpha_low,
            &g_bias_low,
        )?)
    } else {
        None
    };
    Ok(Evaluation {
        breakdown,
        grads,
        kinks,
    })
}

/// Runs `cfg.opt_steps` Adam iterations from `params`. The trace records
/// the loss seen before each update.
pub fn optimize(
    mut params: NetworkParams,
    ctx: &VolumeContext,
    cfg: &CorrectionConfig,
) -> Result<(NetworkParams, Vec<LossBreakdown>)> {
    let mut state = AdamState::new(&params);
    let mut trace = Vec::with_capacity(cfg.opt_steps);
    for step in 1..=cfg.opt_steps {
        let eval = evaluate(&params, ctx, cfg, true)?;
        if !eval.breakdown.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("non-finite loss {:?}", eval.breakdown),
            });
        }
        trace.push(eval.breakdown);
        let grads = eval.grads.expect("requested gradients");
        adam_step(
            &mut params,
            &grads,
            &mut state,
            cfg.learning_rate,
            cfg.weight_decay,
            cfg.decoupled_weight_decay,
        )?;
        log::debug!("step {step}: total {:.6}", eval.breakdown.total);
    }
    Ok((params, trace))
}

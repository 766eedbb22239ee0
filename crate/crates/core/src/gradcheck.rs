//! Central finite-difference verification of every analytic gradient.
//!
//! Each check builds a random instance, reduces the op's output to a scalar
//! through a random weighting, and compares the analytic gradient with
//! `(f(x + h) - f(x - h)) / 2h` coordinate by coordinate. The error of one
//! coordinate is `|a - n| / max(|a|, |n|, floor / tol)`, so it is below
//! `tol` exactly when the relative error is below `tol` or the absolute
//! error is below `floor`.
//!
//! Coordinates whose perturbation crosses a kink (a sign change of any
//! ReLU or absolute-value argument) are skipped and counted.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::correction::{self, CorrectionConfig};
use crate::error::{Error, Result};
use crate::losses::{self, LossWeights, Neighborhood};
use crate::network::{self, Architecture, NetworkParams};
use crate::ops;
use crate::optimizer::{self, VolumeContext};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;
pub const ABS_FLOOR: f64 = 1e-6;
pub const SEEDS_PER_OP: u64 = 5;

/// Names of every registered check, in report order.
pub const OPS: &[&str] = &[
    "conv3d_depthwise",
    "conv3d_pointwise",
    "trilinear_resize",
    "avg_pool3d",
    "add",
    "mul",
    "tanh",
    "sigmoid",
    "relu",
    "abs",
    "square",
    "hc_iterate",
    "smoothness_loss",
    "spatial_consistency_loss",
    "exposure_loss",
    "prior_loss",
    "total_loss",
    "network_forward",
    "end_to_end",
];

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    pub seed: u64,
    /// Largest spatial extent of random instances.
    pub size: usize,
    /// Coordinates checked per input tensor at most.
    pub max_coords: usize,
    /// Test hook: perturb the analytic gradient of this op.
    pub corrupt: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            seed: 0,
            size: 8,
            max_coords: 96,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub op: String,
    pub max_error: f64,
    pub checked: usize,
    pub skipped: usize,
    pub passed: bool,
}

type Objective = Box<dyn Fn(&[Tensor]) -> Result<(f64, Vec<i8>)>>;

struct Problem {
    inputs: Vec<Tensor>,
    analytic: Vec<Tensor>,
    objective: Objective,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Uniform magnitudes in `[lo, hi)` with random sign.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(lo..hi);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

fn random_dims(rng: &mut ChaCha8Rng, max_c: usize, size: usize) -> [usize; 4] {
    [
        rng.random_range(1..=max_c),
        rng.random_range(1..=size),
        rng.random_range(1..=size),
        rng.random_range(1..=size),
    ]
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn sig_of(t: &Tensor) -> Vec<i8> {
    t.data().iter().map(|&v| network::sign_i8(v)).collect()
}

fn build(op: &str, rng: &mut ChaCha8Rng, size: usize) -> Result<Problem> {
    let size = size.max(2);
    let p = match op {
        "conv3d_depthwise" => {
            let dims = random_dims(rng, 4, size);
            let x = uniform(rng, &dims, -1.0, 1.0);
            let k = uniform(rng, &[dims[0], 3, 3, 3], -0.5, 0.5);
            let b = uniform(rng, &[dims[0]], -0.5, 0.5);
            let g = uniform(rng, &dims, -1.0, 1.0);
            let gr = ops::conv3d_depthwise_backward(&x, &k, &b, &g)?;
            Problem {
                inputs: vec![x, k, b],
                analytic: vec![gr.input, gr.kernels, gr.bias],
                objective: Box::new(move |t| {
                    Ok((
                        dot(&ops::conv3d_depthwise(&t[0], &t[1], &t[2])?, &g),
                        vec![],
                    ))
                }),
            }
        }
        "conv3d_pointwise" => {
            let dims = random_dims(rng, 4, size);
            let cout = rng.random_range(1..=4);
            let x = uniform(rng, &dims, -1.0, 1.0);
            let k = uniform(rng, &[cout, dims[0]], -0.5, 0.5);
            let b = uniform(rng, &[cout], -0.5, 0.5);
            let g = uniform(rng, &[cout, dims[1], dims[2], dims[3]], -1.0, 1.0);
            let gr = ops::conv3d_pointwise_backward(&x, &k, &b, &g)?;
            Problem {
                inputs: vec![x, k, b],
                analytic: vec![gr.input, gr.kernels, gr.bias],
                objective: Box::new(move |t| {
                    Ok((
                        dot(&ops::conv3d_pointwise(&t[0], &t[1], &t[2])?, &g),
                        vec![],
                    ))
                }),
            }
        }
        "trilinear_resize" => {
            let dims = random_dims(rng, 4, size);
            let target = [0; 3].map(|_| rng.random_range(1..=size));
            let x = uniform(rng, &dims, -1.0, 1.0);
            let g = uniform(rng, &[dims[0], target[0], target[1], target[2]], -1.0, 1.0);
            let gx = ops::trilinear_resize_backward(dims, &g)?;
            Problem {
                inputs: vec![x],
                analytic: vec![gx],
                objective: Box::new(move |t| {
                    Ok((dot(&ops::trilinear_resize(&t[0], target)?, &g), vec![]))
                }),
            }
        }
        "avg_pool3d" => {
            let dims = random_dims(rng, 4, size);
            let region = rng.random_range(1..=4);
            let x = uniform(rng, &dims, -1.0, 1.0);
            let pooled = ops::avg_pool3d(&x, region)?;
            let g = uniform(rng, pooled.shape(), -1.0, 1.0);
            let gx = ops::avg_pool3d_backward(dims, region, &g)?;
            Problem {
                inputs: vec![x],
                analytic: vec![gx],
                objective: Box::new(move |t| {
                    Ok((dot(&ops::avg_pool3d(&t[0], region)?, &g), vec![]))
                }),
            }
        }
        "add" | "mul" => {
            let dims = random_dims(rng, 4, size);
            let a = uniform(rng, &dims, -1.0, 1.0);
            let b = uniform(rng, &dims, -1.0, 1.0);
            let g = uniform(rng, &dims, -1.0, 1.0);
            let is_mul = op == "mul";
            let (ga, gb) = if is_mul {
                ops::mul_backward(&a, &b, &g)?
            } else {
                ops::add_backward(&g)
            };
            Problem {
                inputs: vec![a, b],
                analytic: vec![ga, gb],
                objective: Box::new(move |t| {
                    let out = if is_mul {
                        ops::mul(&t[0], &t[1])?
                    } else {
                        ops::add(&t[0], &t[1])?
                    };
                    Ok((dot(&out, &g), vec![]))
                }),
            }
        }
        "tanh" | "sigmoid" | "relu" | "abs" | "square" => {
            let dims = random_dims(rng, 4, size);
            // Kinked ops are sampled at least 0.05 away from zero.
            let x = away_from_zero(rng, &dims, 0.05, 2.0);
            let g = uniform(rng, &dims, -1.0, 1.0);
            let gx = match op {
                "tanh" => ops::tanh_backward(&ops::tanh(&x), &g)?,
                "sigmoid" => ops::sigmoid_backward(&ops::sigmoid(&x), &g)?,
                "relu" => ops::relu_backward(&x, &g)?,
                "abs" => ops::abs_backward(&x, &g)?,
                _ => ops::square_backward(&x, &g)?,
            };
            let which = op.to_string();
            Problem {
                inputs: vec![x],
                analytic: vec![gx],
                objective: Box::new(move |t| {
                    let y = match which.as_str() {
                        "tanh" => ops::tanh(&t[0]),
                        "sigmoid" => ops::sigmoid(&t[0]),
                        "relu" => ops::relu(&t[0]),
                        "abs" => ops::abs(&t[0]),
                        _ => ops::square(&t[0]),
                    };
                    Ok((dot(&y, &g), sig_of(&t[0])))
                }),
            }
        }
        "hc_iterate" => {
            let dims = random_dims(rng, 1, size);
            let n = rng.random_range(1..=6);
            let i = uniform(rng, &dims, 0.05, 0.95);
            // Six compositions of the quadratic have large third derivatives
            // for |alpha| near 1, where a 1e-3 central difference is itself
            // off by more than the tolerance.
            let a = uniform(rng, &dims, -0.5, 0.5);
            let g = uniform(rng, &dims, -1.0, 1.0);
            let (gi, ga) = correction::hc_iterate_backward(&i, &a, n, &g)?;
            Problem {
                inputs: vec![i, a],
                analytic: vec![gi, ga],
                objective: Box::new(move |t| {
                    Ok((dot(&correction::hc_iterate(&t[0], &t[1], n)?, &g), vec![]))
                }),
            }
        }
        "smoothness_loss" => {
            let dims = random_dims(rng, 1, size);
            let m = uniform(rng, &dims, -1.0, 1.0);
            let gm = losses::smoothness_loss_grad(&m)?;
            Problem {
                inputs: vec![m],
                analytic: vec![gm],
                objective: Box::new(|t| {
                    let z = Tensor::zeros(t[0].shape());
                    let one = Tensor::full(t[0].shape(), 1.0);
                    let w = LossWeights::default();
                    let mut sig = losses::kink_signature(&z, &z, &t[0], &one, &w)?;
                    sig.truncate(t[0].len() * 3);
                    Ok((losses::smoothness_loss(&t[0])?, sig))
                }),
            }
        }
        "spatial_consistency_loss" => {
            let dims = random_dims(rng, 1, size);
            let region = rng.random_range(1..=3);
            let nb = [
                Neighborhood::Face6,
                Neighborhood::Edge18,
                Neighborhood::Full26,
            ][rng.random_range(0..3)];
            let hc = uniform(rng, &dims, 0.0, 1.0);
            let y = uniform(rng, &dims, 0.0, 1.0);
            let g = losses::spatial_consistency_loss_grad(&hc, &y, region, nb)?;
            let w = LossWeights {
                spa_region: region,
                neighborhood: nb,
                ..Default::default()
            };
            Problem {
                inputs: vec![hc],
                analytic: vec![g],
                objective: Box::new(move |t| {
                    let z = Tensor::zeros(t[0].shape());
                    let sig = losses::kink_signature(&y, &t[0], &z, &z, &w)?;
                    Ok((
                        losses::spatial_consistency_loss(&t[0], &y, region, nb)?,
                        sig,
                    ))
                }),
            }
        }
        "exposure_loss" => {
            let dims = random_dims(rng, 1, size);
            let region = rng.random_range(1..=4);
            let target = rng.random_range(0.2..0.8);
            let hc = uniform(rng, &dims, 0.0, 1.0);
            let g = losses::exposure_loss_grad(&hc, region, target)?;
            Problem {
                inputs: vec![hc],
                analytic: vec![g],
                objective: Box::new(move |t| {
                    Ok((losses::exposure_loss(&t[0], region, target)?, vec![]))
                }),
            }
        }
        "prior_loss" => {
            let dims = random_dims(rng, 1, size);
            let y = uniform(rng, &dims, 0.0, 1.0);
            let x = uniform(rng, &dims, 0.0, 1.0);
            let b = uniform(rng, &dims, 0.05, 0.95);
            let w_smo = rng.random_range(0.0..10.0);
            let (gx, gb) = losses::prior_loss_grad(&y, &x, &b, w_smo)?;
            Problem {
                inputs: vec![x, b],
                analytic: vec![gx, gb],
                objective: Box::new(move |t| {
                    let z = Tensor::zeros(t[0].shape());
                    let sig =
                        losses::kink_signature(&y, &t[0], &z, &t[1], &LossWeights::default())?;
                    Ok((losses::prior_loss(&y, &t[0], &t[1], w_smo)?, sig))
                }),
            }
        }
        "total_loss" => {
            let dims = [1, 8, 8, 8];
            let w = LossWeights {
                spa_region: 2,
                exp_region: 4,
                ..Default::default()
            };
            let y = uniform(rng, &dims, 0.0, 1.0);
            let hc = uniform(rng, &dims, 0.0, 1.0);
            let a = uniform(rng, &dims, -0.9, 0.9);
            let b = uniform(rng, &dims, 0.05, 0.95);
            let g = losses::total_loss_grad(&y, &hc, &a, &b, &w)?;
            Problem {
                inputs: vec![hc, a, b],
                analytic: vec![g.hc_out, g.alpha, g.b_hat],
                objective: Box::new(move |t| {
                    let sig = losses::kink_signature(&y, &t[0], &t[1], &t[2], &w)?;
                    Ok((losses::total_loss(&y, &t[0], &t[1], &t[2], &w)?.total, sig))
                }),
            }
        }
        "network_forward" => {
            let arch = Architecture::default();
            let params = NetworkParams::random(arch, rng.random(), 0.3)?;
            let dims = [
                1,
                rng.random_range(1..=4),
                rng.random_range(1..=4),
                rng.random_range(1..=4),
            ];
            let x = uniform(rng, &dims, 0.0, 1.0);
            let ga = uniform(rng, &dims, -1.0, 1.0);
            let gb = uniform(rng, &dims, -1.0, 1.0);
            let cache = network::forward_cached(&params, &x)?;
            let grads = network::backward(&params, &cache, &ga, &gb)?;
            let flat = Tensor::new(vec![params.param_count()], params.flat())?;
            let analytic = Tensor::new(vec![grads.param_count()], grads.flat())?;
            Problem {
                inputs: vec![flat],
                analytic: vec![analytic],
                objective: Box::new(move |t| {
                    let mut p = params.clone();
                    p.set_flat(t[0].data())?;
                    let c = network::forward_cached(&p, &x)?;
                    let m = c.maps();
                    Ok((dot(&m.alpha, &ga) + dot(&m.bias, &gb), c.relu_signature()))
                }),
            }
        }
        "end_to_end" => {
            let cfg = CorrectionConfig {
                downsample_factor: 2,
                weights: LossWeights {
                    spa_region: 2,
                    exp_region: 4,
                    ..Default::default()
                },
                ..Default::default()
            };
            let params = NetworkParams::random(cfg.architecture, rng.random(), 0.3)?;
            let y = uniform(rng, &[1, 8, 8, 8], 0.0, 1.0);
            let ctx = VolumeContext::new(y, cfg.low_resolution([8, 8, 8]))?;
            let eval = optimizer::evaluate(&params, &ctx, &cfg, true)?;
            let grads = eval.grads.expect("requested");
            let flat = Tensor::new(vec![params.param_count()], params.flat())?;
            let analytic = Tensor::new(vec![grads.param_count()], grads.flat())?;
            Problem {
                inputs: vec![flat],
                analytic: vec![analytic],
                objective: Box::new(move |t| {
                    let mut p = params.clone();
                    p.set_flat(t[0].data())?;
                    let e = optimizer::evaluate(&p, &ctx, &cfg, false)?;
                    Ok((e.breakdown.total, e.kinks))
                }),
            }
        }
        other => return Err(Error::invalid(format!("unknown gradient check {other:?}"))),
    };
    Ok(p)
}

/// Per-coordinate error measure; see the module docs.
pub fn scaled_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(ABS_FLOOR / TOLERANCE);
    (analytic - numeric).abs() / scale
}

/// Runs one op's check for one seed.
pub fn check_op(op: &str, seed: u64, opts: &GradcheckOptions) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut problem = build(op, &mut rng, opts.size)?;
    if opts.corrupt.as_deref() == Some(op) {
        for a in &mut problem.analytic {
            for v in a.data_mut() {
                *v = *v * 1.01 + 1e-3;
            }
        }
    }
    let (_, base_sig) = (problem.objective)(&problem.inputs)?;
    let mut max_error: f64 = 0.0;
    let (mut checked, mut skipped) = (0, 0);
    for k in 0..problem.inputs.len() {
        let n = problem.inputs[k].len();
        let coords: Vec<usize> = if n <= opts.max_coords {
            (0..n).collect()
        } else {
            (0..opts.max_coords)
                .map(|_| rng.random_range(0..n))
                .collect()
        };
        for idx in coords {
            let mut probe = problem.inputs.clone();
            let x0 = probe[k].data()[idx];
            probe[k].data_mut()[idx] = x0 + STEP;
            let (fp, sp) = (problem.objective)(&probe)?;
            probe[k].data_mut()[idx] = x0 - STEP;
            let (fm, sm) = (problem.objective)(&probe)?;
            if sp != base_sig || sm != base_sig {
                skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * STEP);
            let analytic = problem.analytic[k].data()[idx];
            max_error = max_error.max(scaled_error(analytic, numeric));
            checked += 1;
        }
    }
    Ok(CheckOutcome {
        op: op.to_string(),
        max_error,
        checked,
        skipped,
        passed: checked > 0 && max_error < TOLERANCE,
    })
}

/// Every registered op over [`SEEDS_PER_OP`] seeds, aggregated to one
/// outcome per op.
pub fn run_all(opts: &GradcheckOptions) -> Result<Vec<CheckOutcome>> {
    OPS.iter()
        .map(|op| {
            let mut agg = CheckOutcome {
                op: op.to_string(),
                max_error: 0.0,
                checked: 0,
                skipped: 0,
                passed: true,
            };
            for s in 0..SEEDS_PER_OP {
                let o = check_op(op, opts.seed.wrapping_mul(1000).wrapping_add(s), opts)?;
                agg.max_error = agg.max_error.max(o.max_error);
                agg.checked += o.checked;
                agg.skipped += o.skipped;
                agg.passed &= o.passed;
            }
            Ok(agg)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_measure_floor() {
        assert!(scaled_error(1e-9, 5e-7) < TOLERANCE);
        assert!(scaled_error(1e-9, 2e-6) > TOLERANCE);
        assert!(scaled_error(10.0, 10.0005) < TOLERANCE);
        assert!(scaled_error(10.0, 10.002) > TOLERANCE);
    }

    #[test]
    fn unknown_op_is_an_error() {
        assert!(check_op("nope", 0, &GradcheckOptions::default()).is_err());
    }

    #[test]
    fn corruption_hook_fails_the_check() {
        let opts = GradcheckOptions {
            corrupt: Some("square".into()),
            ..Default::default()
        };
        assert!(!check_op("square", 0, &opts).unwrap().passed);
        assert!(check_op("tanh", 0, &opts).unwrap().passed);
    }
}

//! Objective terms for the zero-shot optimization and their gradients.
//!
//! All reductions accumulate in `f64` in a fixed order. Absolute values use
//! the subgradient 0 at their kink.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::sign_i8;
use crate::ops::{self, elementwise_sign as sign0};
use crate::tensor::Tensor;

/// Which pooled blocks count as neighbours in the spatial-consistency term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Neighborhood {
    /// The 6 face-adjacent blocks.
    #[default]
    Face6,
    /// Face and edge neighbours.
    Edge18,
    /// The full 3x3x3 neighbourhood minus the centre.
    Full26,
}

impl Neighborhood {
    pub fn offsets(self) -> Vec<[isize; 3]> {
        let max_l1 = match self {
            Neighborhood::Face6 => 1,
            Neighborhood::Edge18 => 2,
            Neighborhood::Full26 => 3,
        };
        let mut v = Vec::new();
        for dz in -1isize..=1 {
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let l1 = dz.abs() + dy.abs() + dx.abs();
                    if l1 > 0 && l1 <= max_l1 {
                        v.push([dz, dy, dx]);
                    }
                }
            }
        }
        v
    }
}

impl std::str::FromStr for Neighborhood {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "face6" | "6" => Ok(Neighborhood::Face6),
            "edge18" | "18" => Ok(Neighborhood::Edge18),
            "full26" | "26" => Ok(Neighborhood::Full26),
            _ => Err(Error::invalid(format!("unknown neighborhood {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub w_smo_alpha: f64,
    pub w_smo_bias: f64,
    pub w_spa: f64,
    pub w_exp: f64,
    pub w_fidelity: f64,
    /// Well-exposedness level the regional means are pulled towards.
    pub exposure_target: f64,
    pub spa_region: usize,
    pub exp_region: usize,
    pub neighborhood: Neighborhood,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_smo_alpha: 1600.0,
            w_smo_bias: 1600.0,
            w_spa: 1.0,
            w_exp: 1.0,
            w_fidelity: 1.0,
            exposure_target: 0.6,
            spa_region: 4,
            exp_region: 8,
            neighborhood: Neighborhood::Face6,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("w_smo_alpha", self.w_smo_alpha),
            ("w_smo_bias", self.w_smo_bias),
            ("w_spa", self.w_spa),
            ("w_exp", self.w_exp),
            ("w_fidelity", self.w_fidelity),
        ];
        for (name, w) in weights {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::invalid(format!(
                    "{name} must be finite and >= 0, got {w}"
                )));
            }
        }
        if !(self.exposure_target > 0.0 && self.exposure_target < 1.0) {
            return Err(Error::invalid(format!(
                "exposure_target must lie in (0, 1), got {}",
                self.exposure_target
            )));
        }
        if self.spa_region == 0 || self.exp_region == 0 {
            return Err(Error::invalid("pooling regions must be >= 1"));
        }
        Ok(())
    }
}

/// Unweighted loss components and the weighted total for one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub smo_alpha: f64,
    pub spa: f64,
    pub exp: f64,
    pub fidelity: f64,
    pub smo_bias: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn recompose(&self, w: &LossWeights) -> f64 {
        w.w_smo_alpha * self.smo_alpha
            + w.w_spa * self.spa
            + w.w_exp * self.exp
            + w.w_fidelity * self.fidelity
            + w.w_smo_bias * self.smo_bias
    }

    pub fn is_finite(&self) -> bool {
        [
            self.smo_alpha,
            self.spa,
            self.exp,
            self.fidelity,
            self.smo_bias,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Visits every (voxel, axis) pair that has a forward neighbour, passing
/// the flat index of the voxel and of its neighbour along that axis.
fn for_each_forward_pair(dims: [usize; 4], mut f: impl FnMut(usize, usize, usize)) {
    let [c, d, h, w] = dims;
    for ch in 0..c {
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let i = ((ch * d + z) * h + y) * w + x;
                    if z + 1 < d {
                        f(i, i + h * w, 0);
                    }
                    if y + 1 < h {
                        f(i, i + w, 1);
                    }
                    if x + 1 < w {
                        f(i, i + 1, 2);
                    }
                }
            }
        }
    }
}

fn gradient_l1(map: &Tensor) -> Result<Vec<f64>> {
    let dims = map.dims4()?;
    let v = map.data();
    let mut s = vec![0.0; v.len()];
    for_each_forward_pair(dims, |i, j, _| s[i] += (v[j] - v[i]).abs());
    Ok(s)
}

/// Mean over voxels of `(|dz| + |dy| + |dx|)^2` with forward differences;
/// the last slice along an axis contributes 0 for that axis.
pub fn smoothness_loss(map: &Tensor) -> Result<f64> {
    let s = gradient_l1(map)?;
    Ok(s.iter().map(|v| v * v).sum::<f64>() / s.len() as f64)
}

pub fn smoothness_loss_grad(map: &Tensor) -> Result<Tensor> {
    let dims = map.dims4()?;
    let s = gradient_l1(map)?;
    let v = map.data();
    let n = v.len() as f64;
    let mut g = vec![0.0; v.len()];
    for_each_forward_pair(dims, |i, j, _| {
        let c = 2.0 * s[i] * sign0(v[j] - v[i]) / n;
        g[j] += c;
        g[i] -= c;
    });
    Ok(Tensor::from_raw(map.shape().to_vec(), g))
}

fn smoothness_signature(map: &Tensor, out: &mut Vec<i8>) -> Result<()> {
    let dims = map.dims4()?;
    let v = map.data();
    for_each_forward_pair(dims, |i, j, _| out.push(sign_i8(v[j] - v[i])));
    Ok(())
}

struct PooledPairs {
    dims: [usize; 4],
    pairs: Vec<(usize, usize)>,
}

fn pooled_pairs(pooled_dims: [usize; 4], neighborhood: Neighborhood) -> PooledPairs {
    let [c, d, h, w] = pooled_dims;
    let offsets = neighborhood.offsets();
    let mut pairs = Vec::new();
    for ch in 0..c {
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let i = ((ch * d + z) * h + y) * w + x;
                    for [dz, dy, dx] in &offsets {
                        let (nz, ny, nx) = (z as isize + dz, y as isize + dy, x as isize + dx);
                        if nz < 0
                            || ny < 0
                            || nx < 0
                            || nz >= d as isize
                            || ny >= h as isize
                            || nx >= w as isize
                        {
                            continue;
                        }
                        let j = ((ch * d + nz as usize) * h + ny as usize) * w + nx as usize;
                        pairs.push((i, j));
                    }
                }
            }
        }
    }
    PooledPairs {
        dims: pooled_dims,
        pairs,
    }
}

/// Spatial consistency between region-pooled `hc` and `y`: for every block
/// and each of its in-bounds neighbours, `(|hc_i - hc_j| - |y_i - y_j|)^2`,
/// summed and divided by the block count.
pub fn spatial_consistency_loss(
    hc: &Tensor,
    y: &Tensor,
    region: usize,
    neighborhood: Neighborhood,
) -> Result<f64> {
    hc.expect_same_shape(y)?;
    let ph = ops::avg_pool3d(hc, region)?;
    let py = ops::avg_pool3d(y, region)?;
    let pp = pooled_pairs(ph.dims4()?, neighborhood);
    let (a, b) = (ph.data(), py.data());
    let sum: f64 = pp
        .pairs
        .iter()
        .map(|&(i, j)| {
            let r = (a[i] - a[j]).abs() - (b[i] - b[j]).abs();
            r * r
        })
        .sum();
    Ok(sum / a.len() as f64)
}

/// Gradient of [`spatial_consistency_loss`] with respect to `hc`.
pub fn spatial_consistency_loss_grad(
    hc: &Tensor,
    y: &Tensor,
    region: usize,
    neighborhood: Neighborhood,
) -> Result<Tensor> {
    hc.expect_same_shape(y)?;
    let ph = ops::avg_pool3d(hc, region)?;
    let py = ops::avg_pool3d(y, region)?;
    let pp = pooled_pairs(ph.dims4()?, neighborhood);
    let (a, b) = (ph.data(), py.data());
    let k = a.len() as f64;
    let mut g = vec![0.0; a.len()];
    for &(i, j) in &pp.pairs {
        let diff = a[i] - a[j];
        let r = diff.abs() - (b[i] - b[j]).abs();
        let c = 2.0 * r * sign0(diff) / k;
        g[i] += c;
        g[j] -= c;
    }
    let g = Tensor::from_raw(pp.dims.to_vec(), g);
    ops::avg_pool3d_backward(hc.dims4()?, region, &g)
}

fn spatial_signature(
    hc: &Tensor,
    region: usize,
    neighborhood: Neighborhood,
    out: &mut Vec<i8>,
) -> Result<()> {
    let ph = ops::avg_pool3d(hc, region)?;
    let pp = pooled_pairs(ph.dims4()?, neighborhood);
    let a = ph.data();
    out.extend(pp.pairs.iter().map(|&(i, j)| sign_i8(a[i] - a[j])));
    Ok(())
}

/// Mean over region-pooled blocks of `(block_mean - target)^2`.
pub fn exposure_loss(hc: &Tensor, region: usize, target: f64) -> Result<f64> {
    let p = ops::avg_pool3d(hc, region)?;
    Ok(p.data()
        .iter()
        .map(|&m| (m - target) * (m - target))
        .sum::<f64>()
        / p.len() as f64)
}

pub fn exposure_loss_grad(hc: &Tensor, region: usize, target: f64) -> Result<Tensor> {
    let p = ops::avg_pool3d(hc, region)?;
    let k = p.len() as f64;
    let g = p.map(|m| 2.0 * (m - target) / k);
    ops::avg_pool3d_backward(hc.dims4()?, region, &g)
}

/// Mean absolute residual `|y - x_hat * b_hat|`.
pub fn fidelity_loss(y: &Tensor, x_hat: &Tensor, b_hat: &Tensor) -> Result<f64> {
    y.expect_same_shape(x_hat)?;
    y.expect_same_shape(b_hat)?;
    let sum: f64 = y
        .data()
        .iter()
        .zip(x_hat.data())
        .zip(b_hat.data())
        .map(|((&yv, &xv), &bv)| (yv - xv * bv).abs())
        .sum();
    Ok(sum / y.len() as f64)
}

/// Gradients of [`fidelity_loss`] with respect to `(x_hat, b_hat)`.
pub fn fidelity_loss_grad(y: &Tensor, x_hat: &Tensor, b_hat: &Tensor) -> Result<(Tensor, Tensor)> {
    y.expect_same_shape(x_hat)?;
    y.expect_same_shape(b_hat)?;
    let n = y.len() as f64;
    let mut gx = vec![0.0; y.len()];
    let mut gb = vec![0.0; y.len()];
    for (i, ((&yv, &xv), &bv)) in y
        .data()
        .iter()
        .zip(x_hat.data())
        .zip(b_hat.data())
        .enumerate()
    {
        let s = sign0(yv - xv * bv) / n;
        gx[i] = -s * bv;
        gb[i] = -s * xv;
    }
    Ok((
        Tensor::from_raw(y.shape().to_vec(), gx),
        Tensor::from_raw(y.shape().to_vec(), gb),
    ))
}

/// Image-prior term: fidelity plus weighted smoothness of the bias map.
pub fn prior_loss(y: &Tensor, x_hat: &Tensor, b_hat: &Tensor, w_smo_bias: f64) -> Result<f64> {
    Ok(fidelity_loss(y, x_hat, b_hat)? + w_smo_bias * smoothness_loss(b_hat)?)
}

/// Gradients of [`prior_loss`] with respect to `(x_hat, b_hat)`.
pub fn prior_loss_grad(
    y: &Tensor,
    x_hat: &Tensor,
    b_hat: &Tensor,
    w_smo_bias: f64,
) -> Result<(Tensor, Tensor)> {
    let (gx, mut gb) = fidelity_loss_grad(y, x_hat, b_hat)?;
    let gs = smoothness_loss_grad(b_hat)?;
    for (a, b) in gb.data_mut().iter_mut().zip(gs.data()) {
        *a += w_smo_bias * b;
    }
    Ok((gx, gb))
}

/// Composite objective. `hc_out` is the refined image, which also plays
/// the role of the bias-free estimate in the prior term.
pub fn total_loss(
    y: &Tensor,
    hc_out: &Tensor,
    alpha: &Tensor,
    b_hat: &Tensor,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    y.expect_same_shape(hc_out)?;
    y.expect_same_shape(alpha)?;
    y.expect_same_shape(b_hat)?;
    let mut b = LossBreakdown {
        smo_alpha: smoothness_loss(alpha)?,
        spa: spatial_consistency_loss(hc_out, y, weights.spa_region, weights.neighborhood)?,
        exp: exposure_loss(hc_out, weights.exp_region, weights.exposure_target)?,
        fidelity: fidelity_loss(y, hc_out, b_hat)?,
        smo_bias: smoothness_loss(b_hat)?,
        total: 0.0,
    };
    b.total = b.recompose(weights);
    Ok(b)
}

/// Gradients of the weighted total with respect to its three free inputs.
#[derive(Debug, Clone)]
pub struct TotalLossGrads {
    pub hc_out: Tensor,
    pub alpha: Tensor,
    pub b_hat: Tensor,
}

pub fn total_loss_grad(
    y: &Tensor,
    hc_out: &Tensor,
    alpha: &Tensor,
    b_hat: &Tensor,
    weights: &LossWeights,
) -> Result<TotalLossGrads> {
    y.expect_same_shape(hc_out)?;
    y.expect_same_shape(alpha)?;
    y.expect_same_shape(b_hat)?;
    let w = weights;
    let mut g_hc = spatial_consistency_loss_grad(hc_out, y, w.spa_region, w.neighborhood)?
        .map(|g| g * w.w_spa);
    let g_exp = exposure_loss_grad(hc_out, w.exp_region, w.exposure_target)?;
    let (g_fx, g_fb) = fidelity_loss_grad(y, hc_out, b_hat)?;
    for ((a, e), f) in g_hc
        .data_mut()
        .iter_mut()
        .zip(g_exp.data())
        .zip(g_fx.data())
    {
        *a += w.w_exp * e + w.w_fidelity * f;
    }
    let g_alpha = smoothness_loss_grad(alpha)?.map(|g| g * w.w_smo_alpha);
    let g_sb = smoothness_loss_grad(b_hat)?;
    let g_b = g_fb.zip_map(&g_sb, |f, s| w.w_fidelity * f + w.w_smo_bias * s)?;
    Ok(TotalLossGrads {
        hc_out: g_hc,
        alpha: g_alpha,
        b_hat: g_b,
    })
}

/// Signs of every absolute-value argument in [`total_loss`]. Two inputs
/// with equal signatures lie on the same smooth piece of the objective.
pub fn kink_signature(
    y: &Tensor,
    hc_out: &Tensor,
    alpha: &Tensor,
    b_hat: &Tensor,
    weights: &LossWeights,
) -> Result<Vec<i8>> {
    let mut sig = Vec::new();
    smoothness_signature(alpha, &mut sig)?;
    smoothness_signature(b_hat, &mut sig)?;
    spatial_signature(hc_out, weights.spa_region, weights.neighborhood, &mut sig)?;
    sig.extend(
        y.data()
            .iter()
            .zip(hc_out.data())
            .zip(b_hat.data())
            .map(|((&yv, &xv), &bv)| sign_i8(yv - xv * bv)),
    );
    Ok(sig)
}

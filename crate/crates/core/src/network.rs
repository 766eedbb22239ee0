//! The light-weight depthwise-separable CNN that predicts the correction
//! map and the bias map.
//!
//! Each block is a 3x3x3 depthwise convolution followed by a 1x1x1
//! pointwise convolution and a ReLU. With `blocks = 2m - 1`, blocks
//! `1..=m` form a plain chain and decoder block `m + j` consumes the channel
//! concatenation `[out(m - j), out(m + j - 1)]`, giving the U-shaped skip
//! pattern. A pointwise head emits two channels: channel 0 goes through
//! `tanh` to become the correction map, channel 1 through `sigmoid` to
//! become the bias map.
//!
//! The head starts at zero so a fresh network predicts a zero correction
//! map and a constant 0.5 bias map.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::Tensor;

/// Standard deviation of the Gaussian used for hidden-layer weights.
pub const INIT_STD: f64 = 0.02;

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    /// Hidden channel width of every block.
    pub channels: usize,
    /// Number of DSC blocks; must be odd.
    pub blocks: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            channels: 8,
            blocks: 7,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::invalid("architecture needs at least one channel"));
        }
        if self.blocks == 0 || self.blocks.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "block count must be odd and >= 1, got {}",
                self.blocks
            )));
        }
        Ok(())
    }

    /// Length of the plain chain before the first skip concatenation.
    pub fn encoder_depth(&self) -> usize {
        self.blocks.div_ceil(2)
    }

    /// Input channel count of block `i` (0-based).
    fn block_in_channels(&self, i: usize) -> usize {
        if i == 0 {
            1
        } else if i < self.encoder_depth() {
            self.channels
        } else {
            2 * self.channels
        }
    }

    /// For decoder block `i` (0-based), the 0-based index of the encoder
    /// output concatenated in front of the previous block's output.
    fn skip_source(&self, i: usize) -> Option<usize> {
        let m = self.encoder_depth();
        (i >= m).then(|| 2 * (m - 1) - i)
    }

    pub fn param_count(&self) -> usize {
        let c = self.channels;
        let blocks: usize = (0..self.blocks)
            .map(|i| {
                let cin = self.block_in_channels(i);
                cin * 27 + cin + c * cin + c
            })
            .sum();
        blocks + 2 * c + 2
    }
}

/// Weights of one depthwise-separable block.
#[derive(Debug, Clone, PartialEq)]
pub struct DscBlock {
    pub dw_kernels: Tensor,
    pub dw_bias: Tensor,
    pub pw_kernels: Tensor,
    pub pw_bias: Tensor,
}

/// All trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    arch: Architecture,
    pub blocks: Vec<DscBlock>,
    pub head_kernels: Tensor,
    pub head_bias: Tensor,
}

impl NetworkParams {
    /// Hidden weights from a seeded Gaussian(0, 0.02); head and biases zero.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        for b in &mut p.blocks {
            for v in b.dw_kernels.data_mut().iter_mut() {
                *v = normal.sample(&mut rng);
            }
            for v in b.pw_kernels.data_mut().iter_mut() {
                *v = normal.sample(&mut rng);
            }
        }
        Ok(p)
    }

    /// Every parameter, including head and biases, from Gaussian(0, std).
    /// Used to exercise gradients away from the zero-head start.
    pub fn random(arch: Architecture, seed: u64, std: f64) -> Result<Self> {
        let mut p = Self::zeros(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
        for t in p.tensors_mut() {
            for v in t.data_mut().iter_mut() {
                *v = normal.sample(&mut rng);
            }
        }
        Ok(p)
    }

    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let c = arch.channels;
        let blocks = (0..arch.blocks)
            .map(|i| {
                let cin = arch.block_in_channels(i);
                DscBlock {
                    dw_kernels: Tensor::zeros(&[cin, 3, 3, 3]),
                    dw_bias: Tensor::zeros(&[cin]),
                    pw_kernels: Tensor::zeros(&[c, cin]),
                    pw_bias: Tensor::zeros(&[c]),
                }
            })
            .collect();
        Ok(NetworkParams {
            arch,
            blocks,
            head_kernels: Tensor::zeros(&[2, c]),
            head_bias: Tensor::zeros(&[2]),
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.arch).expect("architecture already validated")
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    /// Parameter tensors in storage order: per block depthwise kernels,
    /// depthwise bias, pointwise kernels, pointwise bias; then head kernels
    /// and head bias.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = Vec::with_capacity(4 * self.blocks.len() + 2);
        for b in &self.blocks {
            v.extend([&b.dw_kernels, &b.dw_bias, &b.pw_kernels, &b.pw_bias]);
        }
        v.push(&self.head_kernels);
        v.push(&self.head_bias);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = Vec::with_capacity(4 * self.blocks.len() + 2);
        for b in &mut self.blocks {
            v.extend([
                &mut b.dw_kernels,
                &mut b.dw_bias,
                &mut b.pw_kernels,
                &mut b.pw_bias,
            ]);
        }
        v.push(&mut self.head_kernels);
        v.push(&mut self.head_bias);
        v
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// All parameters as little-endian `f32`, in [`NetworkParams::tensors`] order.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.tensors()
            .iter()
            .flat_map(|t| t.data().iter())
            .flat_map(|&v| (v as f32).to_le_bytes())
            .collect()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors()
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                values.len()
            )));
        }
        let mut off = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&values[off..off + n]);
            off += n;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resolution {
    Downsampled,
    Full,
}

/// Correction map in (-1, 1) and bias map in (0, 1), both `[1, D, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParametricMaps {
    pub alpha: Tensor,
    pub bias: Tensor,
    pub resolution: Resolution,
}

impl ParametricMaps {
    /// Trilinear upsampling of both maps. Interpolation is a convex
    /// combination, so the open ranges are preserved.
    pub fn upsample(&self, target: [usize; 3]) -> Result<ParametricMaps> {
        Ok(ParametricMaps {
            alpha: ops::trilinear_resize(&self.alpha, target)?,
            bias: ops::trilinear_resize(&self.bias, target)?,
            resolution: Resolution::Full,
        })
    }
}

// Keeps activations strictly inside their open ranges when tanh or the
// sigmoid round to the bound in floating point.
const RANGE_MARGIN: f64 = 1e-12;

struct BlockCache {
    input: Tensor,
    depthwise: Tensor,
    preact: Tensor,
}

/// Intermediate values kept by [`forward_cached`] for [`backward`].
pub struct ForwardCache {
    blocks: Vec<BlockCache>,
    last: Tensor,
    maps: ParametricMaps,
}

impl ForwardCache {
    /// Signs of every ReLU pre-activation (-1, 0, 1). A change in this
    /// pattern between two parameter settings means a kink lies between them.
    pub fn relu_signature(&self) -> Vec<i8> {
        self.blocks
            .iter()
            .flat_map(|b| b.preact.data().iter().map(|&v| sign_i8(v)))
            .collect()
    }
}

pub(crate) fn sign_i8(v: f64) -> i8 {
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}

fn check_input(params: &NetworkParams, x: &Tensor) -> Result<()> {
    let [c, ..] = x.dims4()?;
    if c != 1 {
        return Err(Error::invalid(format!(
            "network input must have one channel, got {c}"
        )));
    }
    if !x.is_finite() {
        return Err(Error::invalid("network input contains non-finite values"));
    }
    if params.blocks.len() != params.arch.blocks {
        return Err(Error::invalid(
            "parameter block count does not match architecture",
        ));
    }
    Ok(())
}

pub fn forward(params: &NetworkParams, x: &Tensor) -> Result<ParametricMaps> {
    Ok(forward_cached(params, x)?.maps)
}

pub fn forward_cached(params: &NetworkParams, x: &Tensor) -> Result<ForwardCache> {
    check_input(params, x)?;
    let arch = params.arch;
    let m = arch.encoder_depth();
    let mut outs: Vec<Tensor> = Vec::with_capacity(arch.blocks);
    let mut caches = Vec::with_capacity(arch.blocks);
    for (i, block) in params.blocks.iter().enumerate() {
        let input = if i == 0 {
            x.clone()
        } else if i < m {
            outs[i - 1].clone()
        } else {
            let skip = arch.skip_source(i).expect("decoder block");
            ops::concat_channels(&outs[skip], &outs[i - 1])?
        };
        let depthwise = ops::conv3d_depthwise(&input, &block.dw_kernels, &block.dw_bias)?;
        let preact = ops::conv3d_pointwise(&depthwise, &block.pw_kernels, &block.pw_bias)?;
        outs.push(ops::relu(&preact));
        caches.push(BlockCache {
            input,
            depthwise,
            preact,
        });
    }
    let last = outs.pop().expect("at least one block");
    let head = ops::conv3d_pointwise(&last, &params.head_kernels, &params.head_bias)?;
    let lim = 1.0 - RANGE_MARGIN;
    let alpha = ops::tanh(&head.channel(0)?).map(|v| v.clamp(-lim, lim));
    let bias = ops::sigmoid(&head.channel(1)?).map(|v| v.clamp(RANGE_MARGIN, lim));
    Ok(ForwardCache {
        blocks: caches,
        last,
        maps: ParametricMaps {
            alpha,
            bias,
            resolution: Resolution::Downsampled,
        },
    })
}

impl ForwardCache {
    pub fn maps(&self) -> &ParametricMaps {
        &self.maps
    }
}

/// Gradient of a scalar objective with respect to every parameter, given
/// the objective's gradients with respect to the downsampled maps.
pub fn backward(
    params: &NetworkParams,
    cache: &ForwardCache,
    grad_alpha: &Tensor,
    grad_bias: &Tensor,
) -> Result<NetworkParams> {
    let arch = params.arch;
    let m = arch.encoder_depth();
    let c = arch.channels;
    let mut grads = params.zeros_like();

    let g_z0 = ops::tanh_backward(&cache.maps.alpha, grad_alpha)?;
    let g_z1 = ops::sigmoid_backward(&cache.maps.bias, grad_bias)?;
    let g_head = ops::concat_channels(&g_z0, &g_z1)?;
    let hg = ops::conv3d_pointwise_backward(
        &cache.last,
        &params.head_kernels,
        &params.head_bias,
        &g_head,
    )?;
    grads.head_kernels = hg.kernels;
    grads.head_bias = hg.bias;

    let mut g_out: Vec<Option<Tensor>> = vec![None; arch.blocks];
    g_out[arch.blocks - 1] = Some(hg.input);
    let accumulate = |slot: &mut Option<Tensor>, g: Tensor| match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    };

    for i in (0..arch.blocks).rev() {
        let bc = &cache.blocks[i];
        let block = &params.blocks[i];
        let upstream = match g_out[i].take() {
            Some(g) => g,
            None => continue,
        };
        let g_pre = ops::relu_backward(&bc.preact, &upstream)?;
        let pg = ops::conv3d_pointwise_backward(
            &bc.depthwise,
            &block.pw_kernels,
            &block.pw_bias,
            &g_pre,
        )?;
        let dg = ops::conv3d_depthwise_backward(
            &bc.input,
            &block.dw_kernels,
            &block.dw_bias,
            &pg.input,
        )?;
        let gb = &mut grads.blocks[i];
        gb.pw_kernels = pg.kernels;
        gb.pw_bias = pg.bias;
        gb.dw_kernels = dg.kernels;
        gb.dw_bias = dg.bias;

        if i == 0 {
            continue;
        }
        if i < m {
            accumulate(&mut g_out[i - 1], dg.input);
        } else {
            let skip = arch.skip_source(i).expect("decoder block");
            let (g_skip, g_prev) = ops::split_channels(&dg.input, c)?;
            accumulate(&mut g_out[skip], g_skip);
            accumulate(&mut g_out[i - 1], g_prev);
        }
    }
    Ok(grads)
}

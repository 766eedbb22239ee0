use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Number of blocks of size `region` needed to cover `n` voxels.
pub fn pooled_extent(n: usize, region: usize) -> usize {
    n.div_ceil(region)
}

/// Non-overlapping `region`-cubed block averages. Edge blocks that extend
/// past the volume average only the voxels present.
pub fn avg_pool3d(input: &Tensor, region: usize) -> Result<Tensor> {
    if region == 0 {
        return Err(Error::invalid("pooling region must be >= 1"));
    }
    let [c, d, h, w] = input.dims4()?;
    if region == 1 {
        return Ok(input.clone());
    }
    let (pd, ph, pw) = (
        pooled_extent(d, region),
        pooled_extent(h, region),
        pooled_extent(w, region),
    );
    let x = input.data();
    let mut sums = vec![0.0; c * pd * ph * pw];
    for ch in 0..c {
        for z in 0..d {
            for y in 0..h {
                let src = &x[((ch * d + z) * h + y) * w..][..w];
                let base = ((ch * pd + z / region) * ph + y / region) * pw;
                for (xi, &v) in src.iter().enumerate() {
                    sums[base + xi / region] += v;
                }
            }
        }
    }
    let count = |i: usize, n: usize| (n - i * region).min(region);
    for ch in 0..c {
        for bz in 0..pd {
            for by in 0..ph {
                for bx in 0..pw {
                    let cnt = count(bz, d) * count(by, h) * count(bx, w);
                    sums[((ch * pd + bz) * ph + by) * pw + bx] /= cnt as f64;
                }
            }
        }
    }
    Ok(Tensor::from_raw(vec![c, pd, ph, pw], sums))
}

/// Gradient of [`avg_pool3d`]: each voxel receives its block's upstream
/// gradient divided by the block's voxel count.
pub fn avg_pool3d_backward(
    input_shape: [usize; 4],
    region: usize,
    upstream: &Tensor,
) -> Result<Tensor> {
    if region == 0 {
        return Err(Error::invalid("pooling region must be >= 1"));
    }
    let [c, d, h, w] = input_shape;
    let expected = vec![
        c,
        pooled_extent(d, region),
        pooled_extent(h, region),
        pooled_extent(w, region),
    ];
    if upstream.shape() != expected.as_slice() {
        return Err(Error::ShapeMismatch {
            expected,
            found: upstream.shape().to_vec(),
        });
    }
    if region == 1 {
        return Ok(upstream.clone());
    }
    let (pd, ph, pw) = (expected[1], expected[2], expected[3]);
    let count = |i: usize, n: usize| (n - i * region).min(region);
    let g = upstream.data();
    let mut scaled = vec![0.0; g.len()];
    for ch in 0..c {
        for bz in 0..pd {
            for by in 0..ph {
                for bx in 0..pw {
                    let i = ((ch * pd + bz) * ph + by) * pw + bx;
                    scaled[i] = g[i] / (count(bz, d) * count(by, h) * count(bx, w)) as f64;
                }
            }
        }
    }
    let mut out = vec![0.0; c * d * h * w];
    for ch in 0..c {
        for z in 0..d {
            for y in 0..h {
                let dst = &mut out[((ch * d + z) * h + y) * w..][..w];
                let base = ((ch * pd + z / region) * ph + y / region) * pw;
                for (xi, v) in dst.iter_mut().enumerate() {
                    *v = scaled[base + xi / region];
                }
            }
        }
    }
    Ok(Tensor::from_raw(vec![c, d, h, w], out))
}

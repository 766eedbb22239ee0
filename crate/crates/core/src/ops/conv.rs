use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gradients of a depthwise convolution.
#[derive(Debug, Clone)]
pub struct DepthwiseGrads {
    pub input: Tensor,
    pub kernels: Tensor,
    pub bias: Tensor,
}

/// Gradients of a pointwise convolution.
#[derive(Debug, Clone)]
pub struct PointwiseGrads {
    pub input: Tensor,
    pub kernels: Tensor,
    pub bias: Tensor,
}

fn check_depthwise(input: &Tensor, kernels: &Tensor, bias: &Tensor) -> Result<[usize; 4]> {
    let dims = input.dims4()?;
    let c = dims[0];
    if kernels.shape() != [c, 3, 3, 3] {
        return Err(Error::invalid(format!(
            "depthwise kernels must be [{c},3,3,3], got {:?}",
            kernels.shape()
        )));
    }
    if bias.shape() != [c] {
        return Err(Error::invalid(format!(
            "depthwise bias must be [{c}], got {:?}",
            bias.shape()
        )));
    }
    Ok(dims)
}

/// Per-channel 3x3x3 cross-correlation, stride 1, zero padding 1.
pub fn conv3d_depthwise(input: &Tensor, kernels: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let [c, d, h, w] = check_depthwise(input, kernels, bias)?;
    let x = input.data();
    let k = kernels.data();
    let n = d * h * w;
    let mut out = vec![0.0; c * n];
    for ch in 0..c {
        let xc = &x[ch * n..(ch + 1) * n];
        let kc = &k[ch * 27..(ch + 1) * 27];
        let oc = &mut out[ch * n..(ch + 1) * n];
        for z in 0..d {
            for y in 0..h {
                for xi in 0..w {
                    let mut acc = bias.data()[ch];
                    for dz in 0..3 {
                        let zz = z + dz;
                        if zz < 1 || zz > d {
                            continue;
                        }
                        for dy in 0..3 {
                            let yy = y + dy;
                            if yy < 1 || yy > h {
                                continue;
                            }
                            let row = ((zz - 1) * h + (yy - 1)) * w;
                            for dx in 0..3 {
                                let xx = xi + dx;
                                if xx < 1 || xx > w {
                                    continue;
                                }
                                acc += kc[dz * 9 + dy * 3 + dx] * xc[row + xx - 1];
                            }
                        }
                    }
                    oc[(z * h + y) * w + xi] = acc;
                }
            }
        }
    }
    Ok(Tensor::from_raw(vec![c, d, h, w], out))
}

pub fn conv3d_depthwise_backward(
    input: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    upstream: &Tensor,
) -> Result<DepthwiseGrads> {
    let [c, d, h, w] = check_depthwise(input, kernels, bias)?;
    input.expect_same_shape(upstream)?;
    let x = input.data();
    let k = kernels.data();
    let g = upstream.data();
    let n = d * h * w;
    let mut gx = vec![0.0; c * n];
    let mut gk = vec![0.0; c * 27];
    let mut gb = vec![0.0; c];
    for ch in 0..c {
        let xc = &x[ch * n..(ch + 1) * n];
        let gc = &g[ch * n..(ch + 1) * n];
        let kc = &k[ch * 27..(ch + 1) * 27];
        let gxc = &mut gx[ch * n..(ch + 1) * n];
        let gkc = &mut gk[ch * 27..(ch + 1) * 27];
        gb[ch] = gc.iter().sum();
        for z in 0..d {
            for y in 0..h {
                for xi in 0..w {
                    let up = gc[(z * h + y) * w + xi];
                    if up == 0.0 {
                        continue;
                    }
                    for dz in 0..3 {
                        let zz = z + dz;
                        if zz < 1 || zz > d {
                            continue;
                        }
                        for dy in 0..3 {
                            let yy = y + dy;
                            if yy < 1 || yy > h {
                                continue;
                            }
                            let row = ((zz - 1) * h + (yy - 1)) * w;
                            for dx in 0..3 {
                                let xx = xi + dx;
                                if xx < 1 || xx > w {
                                    continue;
                                }
                                let t = dz * 9 + dy * 3 + dx;
                                let idx = row + xx - 1;
                                gkc[t] += up * xc[idx];
                                gxc[idx] += up * kc[t];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(DepthwiseGrads {
        input: Tensor::from_raw(vec![c, d, h, w], gx),
        kernels: Tensor::from_raw(vec![c, 3, 3, 3], gk),
        bias: Tensor::from_raw(vec![c], gb),
    })
}

fn check_pointwise(input: &Tensor, kernels: &Tensor, bias: &Tensor) -> Result<(usize, [usize; 4])> {
    let dims = input.dims4()?;
    let cin = dims[0];
    let cout = match kernels.shape() {
        [o, i] if *i == cin => *o,
        s => {
            return Err(Error::invalid(format!(
                "pointwise kernels must be [Cout,{cin}], got {s:?}"
            )))
        }
    };
    if bias.shape() != [cout] {
        return Err(Error::invalid(format!(
            "pointwise bias must be [{cout}], got {:?}",
            bias.shape()
        )));
    }
    Ok((cout, dims))
}

/// 1x1x1 convolution: `out[o] = sum_i kernels[o,i] * in[i] + bias[o]` per voxel.
pub fn conv3d_pointwise(input: &Tensor, kernels: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (cout, [cin, d, h, w]) = check_pointwise(input, kernels, bias)?;
    let n = d * h * w;
    let x = input.data();
    let k = kernels.data();
    let mut out = vec![0.0; cout * n];
    for o in 0..cout {
        let oc = &mut out[o * n..(o + 1) * n];
        oc.fill(bias.data()[o]);
        for i in 0..cin {
            let kv = k[o * cin + i];
            for (dst, &src) in oc.iter_mut().zip(&x[i * n..(i + 1) * n]) {
                *dst += kv * src;
            }
        }
    }
    Ok(Tensor::from_raw(vec![cout, d, h, w], out))
}

pub fn conv3d_pointwise_backward(
    input: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    upstream: &Tensor,
) -> Result<PointwiseGrads> {
    let (cout, [cin, d, h, w]) = check_pointwise(input, kernels, bias)?;
    if upstream.shape() != [cout, d, h, w] {
        return Err(Error::ShapeMismatch {
            expected: vec![cout, d, h, w],
            found: upstream.shape().to_vec(),
        });
    }
    let n = d * h * w;
    let x = input.data();
    let k = kernels.data();
    let g = upstream.data();
    let mut gx = vec![0.0; cin * n];
    let mut gk = vec![0.0; cout * cin];
    let mut gb = vec![0.0; cout];
    for o in 0..cout {
        let go = &g[o * n..(o + 1) * n];
        gb[o] = go.iter().sum();
        for i in 0..cin {
            let xi = &x[i * n..(i + 1) * n];
            gk[o * cin + i] = go.iter().zip(xi).map(|(a, b)| a * b).sum();
            let kv = k[o * cin + i];
            for (dst, &up) in gx[i * n..(i + 1) * n].iter_mut().zip(go) {
                *dst += kv * up;
            }
        }
    }
    Ok(PointwiseGrads {
        input: Tensor::from_raw(vec![cin, d, h, w], gx),
        kernels: Tensor::from_raw(vec![cout, cin], gk),
        bias: Tensor::from_raw(vec![cout], gb),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn delta_kernel(c: usize) -> Tensor {
        let mut k = Tensor::zeros(&[c, 3, 3, 3]);
        for ch in 0..c {
            k.data_mut()[ch * 27 + 13] = 1.0;
        }
        k
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let x = Tensor::full(&[1, 3, 3, 3], 1.0);
        let out = conv3d_depthwise(&x, &delta_kernel(1), &Tensor::zeros(&[1])).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn zero_kernel_yields_bias() {
        let x = Tensor::from_fn(&[2, 2, 3, 4], |i| (i as f64).sin());
        let out =
            conv3d_depthwise(&x, &Tensor::zeros(&[2, 3, 3, 3]), &Tensor::full(&[2], 0.5)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn box_kernel_center_and_corner() {
        let x = Tensor::full(&[1, 5, 5, 5], 1.0);
        let k = Tensor::full(&[1, 3, 3, 3], 1.0 / 27.0);
        let out = conv3d_depthwise(&x, &k, &Tensor::zeros(&[1])).unwrap();
        let at = |z: usize, y: usize, x: usize| out.data()[(z * 5 + y) * 5 + x];
        assert!((at(2, 2, 2) - 1.0).abs() < 1e-12);
        assert!((at(0, 0, 0) - 8.0 / 27.0).abs() < 1e-12);
        assert!((at(4, 4, 4) - 8.0 / 27.0).abs() < 1e-12);
    }

    #[test]
    fn depthwise_rejects_mismatch() {
        let x = Tensor::zeros(&[2, 3, 3, 3]);
        assert!(conv3d_depthwise(&x, &delta_kernel(1), &Tensor::zeros(&[2])).is_err());
        assert!(conv3d_depthwise(&x, &delta_kernel(2), &Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn pointwise_identity_and_constant() {
        let x = Tensor::from_fn(&[3, 2, 2, 2], |i| i as f64 * 0.1);
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        assert_eq!(conv3d_pointwise(&x, &eye, &Tensor::zeros(&[3])).unwrap(), x);
        let out = conv3d_pointwise(
            &x,
            &Tensor::zeros(&[2, 3]),
            &Tensor::new(vec![2], vec![1.5, -2.0]).unwrap(),
        )
        .unwrap();
        assert!(out.channel(0).unwrap().data().iter().all(|&v| v == 1.5));
        assert!(out.channel(1).unwrap().data().iter().all(|&v| v == -2.0));
    }

    #[test]
    fn pointwise_weighted_mix() {
        let x = Tensor::new(vec![2, 1, 1, 1], vec![0.4, 0.8]).unwrap();
        let k = Tensor::new(vec![1, 2], vec![0.25, 0.75]).unwrap();
        let out = conv3d_pointwise(&x, &k, &Tensor::zeros(&[1])).unwrap();
        assert!((out.data()[0] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn pointwise_rejects_channel_mismatch() {
        let x = Tensor::zeros(&[2, 1, 1, 1]);
        assert!(conv3d_pointwise(&x, &Tensor::zeros(&[1, 3]), &Tensor::zeros(&[1])).is_err());
    }
}

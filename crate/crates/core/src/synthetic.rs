//! Ground-truth test data: piecewise-constant nested-ellipsoid phantoms,
//! smooth multiplicative bias fields, and the forward corruption
//! `Y = X * B + noise`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::volume::{LabelMask, Volume};

pub const MIN_PHANTOM_EXTENT: usize = 16;

/// Nested ellipsoids. Tissue `k` (0 = outermost) is the inside of
/// ellipsoid `k` minus the inside of ellipsoid `k + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EllipsoidGeometry {
    /// Semi-axes of the outermost ellipsoid as fractions of `(D, H, W)`.
    pub outer_semi_axes: [f64; 3],
    /// Scale of each ellipsoid relative to the outermost one; one entry per
    /// tissue, decreasing.
    pub scales: Vec<f64>,
    /// Maximum random perturbation of centres (fraction of extent) and of
    /// semi-axes (relative).
    pub jitter: f64,
}

impl Default for EllipsoidGeometry {
    fn default() -> Self {
        EllipsoidGeometry {
            outer_semi_axes: [0.42, 0.40, 0.38],
            scales: vec![1.0, 0.72, 0.42],
            jitter: 0.03,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    /// `[D, H, W]`.
    pub shape: [usize; 3],
    /// One intensity per tissue, outermost first.
    pub tissue_intensities: Vec<f64>,
    pub geometry: EllipsoidGeometry,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            shape: [64, 64, 64],
            tissue_intensities: vec![0.3, 0.6, 0.9],
            geometry: EllipsoidGeometry::default(),
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.shape.iter().any(|&e| e < MIN_PHANTOM_EXTENT) {
            return Err(Error::invalid(format!(
                "phantom extents must be >= {MIN_PHANTOM_EXTENT}, got {:?}",
                self.shape
            )));
        }
        let t = &self.tissue_intensities;
        if t.is_empty() {
            return Err(Error::invalid("phantom needs at least one tissue"));
        }
        if t.iter().any(|&v| !(v > 0.0 && v < 1.0)) || t.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid(format!(
                "tissue intensities must be strictly increasing in (0, 1), got {t:?}"
            )));
        }
        if self.geometry.scales.len() != t.len() {
            return Err(Error::invalid(format!(
                "{} ellipsoid scales for {} tissues",
                self.geometry.scales.len(),
                t.len()
            )));
        }
        Ok(())
    }

    /// Label names for the phantom's tissues: CSF/GM/WM for three tissues.
    pub fn label_names(&self) -> BTreeMap<u32, String> {
        let n = self.tissue_intensities.len();
        (1..=n as u32)
            .map(|l| {
                let name = match (n, l) {
                    (3, 1) => "CSF".to_string(),
                    (3, 2) => "GM".to_string(),
                    (3, 3) => "WM".to_string(),
                    _ => format!("tissue{l}"),
                };
                (l, name)
            })
            .collect()
    }
}

/// Builds the clean phantom and its label mask.
pub fn make_phantom(spec: &PhantomSpec) -> Result<(Volume, LabelMask)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let [d, h, w] = spec.shape;
    let ext = [d as f64, h as f64, w as f64];
    let g = &spec.geometry;
    let mut jit = |scale: f64| g.jitter * scale * (2.0 * rng.random::<f64>() - 1.0);
    let ellipsoids: Vec<([f64; 3], [f64; 3])> = g
        .scales
        .iter()
        .map(|&s| {
            let centre = [0, 1, 2].map(|a| (ext[a] - 1.0) / 2.0 + jit(ext[a]));
            let semi = [0, 1, 2].map(|a| g.outer_semi_axes[a] * ext[a] * s * (1.0 + jit(1.0)));
            (centre, semi)
        })
        .collect();

    let mut labels = vec![0.0; d * h * w];
    let mut clean = vec![0.0; d * h * w];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [z as f64, y as f64, x as f64];
                let inside = |(c, s): &([f64; 3], [f64; 3])| {
                    (0..3).map(|a| ((p[a] - c[a]) / s[a]).powi(2)).sum::<f64>() <= 1.0
                };
                if let Some(k) = ellipsoids.iter().rposition(inside) {
                    let i = (z * h + y) * w + x;
                    labels[i] = (k + 1) as f64;
                    clean[i] = spec.tissue_intensities[k];
                }
            }
        }
    }
    let mask = LabelMask::new(Tensor::new(vec![d, h, w], labels)?, spec.label_names())?;
    for l in 1..=spec.tissue_intensities.len() as u32 {
        if mask.count(l) == 0 {
            return Err(Error::invalid(format!(
                "phantom geometry leaves tissue {l} empty"
            )));
        }
    }
    Ok((
        Volume::from_tensor(Tensor::new(vec![d, h, w], clean)?)?,
        mask,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BiasSpec {
    /// Field range before mean normalization is `[1 - s, 1 + s]`.
    pub strength: f64,
    /// Number of Gaussian bumps summed.
    pub bumps: usize,
    /// Bump standard deviation range as a fraction of each extent.
    pub width_range: (f64, f64),
    pub seed: u64,
}

impl Default for BiasSpec {
    fn default() -> Self {
        BiasSpec {
            strength: 0.3,
            bumps: 4,
            width_range: (0.25, 0.5),
            seed: 0,
        }
    }
}

impl BiasSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.strength) {
            return Err(Error::invalid(format!(
                "bias strength must lie in [0, 1), got {}",
                self.strength
            )));
        }
        if self.bumps == 0 {
            return Err(Error::invalid("bias field needs at least one bump"));
        }
        let (lo, hi) = self.width_range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::invalid(format!(
                "invalid width range {:?}",
                self.width_range
            )));
        }
        Ok(())
    }
}

/// Smooth positive field: a sum of broad Gaussians rescaled to
/// `[1 - s, 1 + s]` and then divided by its mean.
pub fn make_bias_field(shape: [usize; 3], spec: &BiasSpec) -> Result<Volume> {
    spec.validate()?;
    let [d, h, w] = shape;
    if shape.contains(&0) {
        return Err(Error::invalid("bias field shape has a zero extent"));
    }
    let n = d * h * w;
    if spec.strength == 0.0 {
        return Volume::from_tensor(Tensor::full(&[d, h, w], 1.0));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let ext = [d as f64, h as f64, w as f64];
    let bumps: Vec<([f64; 3], [f64; 3], f64)> = (0..spec.bumps)
        .map(|_| {
            let centre = ext.map(|e| rng.random::<f64>() * (e - 1.0));
            let width = rng.random_range(spec.width_range.0..=spec.width_range.1);
            let sigma = ext.map(|e| width * e);
            let amp = rng.random_range(0.5..=1.0);
            (centre, sigma, amp)
        })
        .collect();

    let mut field = vec![0.0; n];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [z as f64, y as f64, x as f64];
                field[(z * h + y) * w + x] = bumps
                    .iter()
                    .map(|(c, s, a)| {
                        let r2: f64 = (0..3).map(|k| ((p[k] - c[k]) / s[k]).powi(2)).sum();
                        a * (-0.5 * r2).exp()
                    })
                    .sum();
            }
        }
    }
    let (lo, hi) = field
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    let s = spec.strength;
    if hi > lo {
        for v in &mut field {
            *v = (1.0 - s) + 2.0 * s * (*v - lo) / (hi - lo);
        }
    } else {
        field.fill(1.0);
    }
    let mean = field.iter().sum::<f64>() / n as f64;
    for v in &mut field {
        *v /= mean;
    }
    Volume::from_tensor(Tensor::new(vec![d, h, w], field)?)
}

/// `Y = X * B + N(0, noise_sigma)`, seeded; keeps `clean`'s geometry.
pub fn corrupt(clean: &Volume, bias: &Volume, noise_sigma: f64, seed: u64) -> Result<Volume> {
    clean.data.expect_same_shape(&bias.data)?;
    if !(noise_sigma.is_finite() && noise_sigma >= 0.0) {
        return Err(Error::invalid(format!(
            "noise sigma must be >= 0, got {noise_sigma}"
        )));
    }
    let mut y = clean.data.zip_map(&bias.data, |x, b| x * b)?;
    if noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, noise_sigma).expect("valid sigma");
        for v in y.data_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    clean.with_data(y)
}

/// Everything `simulate` produces for one instance.
pub struct SyntheticCase {
    pub clean: Volume,
    pub bias: Volume,
    pub corrupted: Volume,
    pub mask: LabelMask,
}

/// Phantom, bias and corruption with seeds derived from one `seed`.
pub fn make_case(
    phantom: &PhantomSpec,
    bias: &BiasSpec,
    noise_sigma: f64,
    seed: u64,
) -> Result<SyntheticCase> {
    let (clean, mask) = make_phantom(&PhantomSpec {
        seed,
        ..phantom.clone()
    })?;
    let field = make_bias_field(
        phantom.shape,
        &BiasSpec {
            seed: seed.wrapping_add(1),
            ..bias.clone()
        },
    )?;
    let corrupted = corrupt(&clean, &field, noise_sigma, seed.wrapping_add(2))?;
    Ok(SyntheticCase {
        clean,
        bias: field,
        corrupted,
        mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phantom_is_piecewise_constant_and_seeded() {
        let spec = PhantomSpec::default();
        let (x, m) = make_phantom(&spec).unwrap();
        for (k, &val) in spec.tissue_intensities.iter().enumerate() {
            let l = k as u32 + 1;
            assert!(m.count(l) > 0);
            for (i, &v) in x.data.data().iter().enumerate() {
                if m.label_at(i) == l {
                    assert_eq!(v, val);
                }
            }
        }
        let (x2, m2) = make_phantom(&spec).unwrap();
        assert_eq!((x, m), (x2, m2));
    }

    #[test]
    fn phantom_validation() {
        let small = PhantomSpec {
            shape: [8, 64, 64],
            ..Default::default()
        };
        assert!(make_phantom(&small).is_err());
        let unordered = PhantomSpec {
            tissue_intensities: vec![0.6, 0.3, 0.9],
            ..Default::default()
        };
        assert!(make_phantom(&unordered).is_err());
        let vanishing = PhantomSpec {
            geometry: EllipsoidGeometry {
                scales: vec![1.0, 0.72, 0.001],
                ..Default::default()
            },
            ..Default::default()
        };
        assert!(make_phantom(&vanishing).is_err());
    }

    #[test]
    fn zero_strength_is_flat() {
        let b = make_bias_field(
            [16, 16, 16],
            &BiasSpec {
                strength: 0.0,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(b.data.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn field_range_and_mean() {
        let spec = BiasSpec::default();
        let b = make_bias_field([32, 32, 32], &spec).unwrap();
        // Before the mean division the field spans exactly [0.7, 1.3]; the
        // division scales both ends by the same factor.
        let (lo, hi) = (b.data.min(), b.data.max());
        assert!((hi / lo - 1.3 / 0.7).abs() < 1e-9);
        assert!((b.data.mean() - 1.0).abs() < 1e-6);
        assert!(b.data.data().iter().all(|&v| v > 0.0));
        assert_eq!(b, make_bias_field([32, 32, 32], &spec).unwrap());
    }

    #[test]
    fn corruption_identities() {
        let (x, _) = make_phantom(&PhantomSpec {
            shape: [16, 16, 16],
            ..Default::default()
        })
        .unwrap();
        let one = Volume::from_tensor(Tensor::full(&[16, 16, 16], 1.0)).unwrap();
        assert_eq!(corrupt(&x, &one, 0.0, 0).unwrap().data, x.data);

        let c = Volume::from_tensor(Tensor::full(&[16, 16, 16], 0.4)).unwrap();
        let b = make_bias_field([16, 16, 16], &BiasSpec::default()).unwrap();
        let y = corrupt(&c, &b, 0.0, 0).unwrap();
        for (yv, bv) in y.data.data().iter().zip(b.data.data()) {
            assert_eq!(*yv, 0.4 * bv);
        }
        assert!(corrupt(
            &c,
            &Volume::from_tensor(Tensor::zeros(&[16, 16, 8])).unwrap(),
            0.0,
            0
        )
        .is_err());
    }
}

use zsbc_core::synthetic::make_case;
use zsbc_core::{
    coefficient_of_variation, corrupt, make_bias_field, make_phantom, BiasSpec, PhantomSpec, Volume,
};

fn bias(strength: f64, seed: u64) -> Volume {
    make_bias_field(
        [64; 3],
        &BiasSpec {
            strength,
            seed,
            ..Default::default()
        },
    )
    .unwrap()
}

#[test]
fn default_phantom_has_every_tissue() {
    let (x, mask) = make_phantom(&PhantomSpec::default()).unwrap();
    assert_eq!(x.shape(), [64; 3]);
    for label in 1..=3 {
        assert!(mask.count(label) > 0, "label {label} empty");
        assert!(coefficient_of_variation(&x, &mask, label).unwrap() < 1e-12);
    }
}

#[test]
fn noiseless_cv_equals_bias_cv_on_tissue() {
    let (x, mask) = make_phantom(&PhantomSpec::default()).unwrap();
    for seed in 0..3 {
        let b = bias(0.3, seed);
        let y = corrupt(&x, &b, 0.0, seed).unwrap();
        for label in 1..=3 {
            let cy = coefficient_of_variation(&y, &mask, label).unwrap();
            let cb = coefficient_of_variation(&b, &mask, label).unwrap();
            assert!((cy - cb).abs() < 1e-6, "label {label}: {cy} vs {cb}");
        }
    }
}

#[test]
fn noise_has_half_normal_mean() {
    let (x, _) = make_phantom(&PhantomSpec::default()).unwrap();
    let b = bias(0.3, 4);
    let y = corrupt(&x, &b, 0.01, 9).unwrap();
    let n = x.data.len() as f64;
    let mad: f64 = (0..x.data.len())
        .map(|i| (y.data.data()[i] - x.data.data()[i] * b.data.data()[i]).abs())
        .sum::<f64>()
        / n;
    let expected = 0.01 * (2.0 / std::f64::consts::PI).sqrt();
    assert!((mad - expected).abs() < 0.1 * expected, "{mad}");
}

#[test]
fn bias_field_range_mean_and_smoothness() {
    for seed in 0..5 {
        let s = 0.3;
        let b = bias(s, seed);
        let mean = b.data.mean();
        assert!((mean - 1.0).abs() < 1e-6);
        assert!(b.data.min() > 0.0);
        // The raw field spans exactly [1-s, 1+s]; dividing by its mean
        // keeps the ratio of the extremes.
        let ratio = b.data.max() / b.data.min();
        assert!((ratio - (1.0 + s) / (1.0 - s)).abs() < 1e-9);

        let d = b.data.data();
        let idx = |z: usize, y: usize, x: usize| (z * 64 + y) * 64 + x;
        let mut total = 0.0;
        let mut count = 0usize;
        for z in 0..63 {
            for y in 0..63 {
                for x in 0..63 {
                    let c = d[idx(z, y, x)];
                    let g = ((d[idx(z + 1, y, x)] - c).powi(2)
                        + (d[idx(z, y + 1, x)] - c).powi(2)
                        + (d[idx(z, y, x + 1)] - c).powi(2))
                    .sqrt();
                    total += g;
                    count += 1;
                }
            }
        }
        assert!(total / count as f64 <= 4.0 * s / 64.0);
    }
}

#[test]
fn zero_strength_gives_unit_field_and_clean_image() {
    let b = bias(0.0, 1);
    assert!(b.data.data().iter().all(|&v| v == 1.0));
    let (x, _) = make_phantom(&PhantomSpec::default()).unwrap();
    assert_eq!(corrupt(&x, &b, 0.0, 3).unwrap().data, x.data);
}

#[test]
fn cases_are_seeded() {
    let p = PhantomSpec {
        shape: [24; 3],
        ..Default::default()
    };
    let a = make_case(&p, &BiasSpec::default(), 0.01, 5).unwrap();
    let b = make_case(&p, &BiasSpec::default(), 0.01, 5).unwrap();
    let c = make_case(&p, &BiasSpec::default(), 0.01, 6).unwrap();
    assert_eq!(a.corrupted, b.corrupted);
    assert_eq!(a.mask, b.mask);
    assert_ne!(a.corrupted, c.corrupted);
}

#[test]
fn invalid_specs_are_rejected() {
    let small = PhantomSpec {
        shape: [8, 64, 64],
        ..Default::default()
    };
    assert!(make_phantom(&small).is_err());
    let unordered = PhantomSpec {
        tissue_intensities: vec![0.6, 0.3],
        ..Default::default()
    };
    assert!(make_phantom(&unordered).is_err());
    assert!(make_bias_field(
        [32; 3],
        &BiasSpec {
            strength: 1.0,
            ..Default::default()
        }
    )
    .is_err());
    let (x, _) = make_phantom(&PhantomSpec {
        shape: [16; 3],
        ..Default::default()
    })
    .unwrap();
    assert!(corrupt(&x, &bias(0.1, 0), 0.0, 0).is_err());
}

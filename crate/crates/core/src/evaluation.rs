//! Per-tissue coefficient of variation and simulation-only fidelity metrics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{LabelMask, Volume};

/// Voxels whose corrected intensity falls below this are left out of the
/// implicit-bias ratio.
pub const RATIO_GUARD: f64 = 1e-6;

/// Population standard deviation over mean for the voxels carrying `label`.
pub fn coefficient_of_variation(volume: &Volume, mask: &LabelMask, label: u32) -> Result<f64> {
    mask.check_matches(volume)?;
    let values: Vec<f64> = volume
        .data
        .data()
        .iter()
        .enumerate()
        .filter(|&(i, _)| mask.label_at(i) == label)
        .map(|(_, &v)| v)
        .collect();
    if values.len() < 2 {
        return Err(Error::invalid(format!(
            "label {label} covers {} voxel(s); need at least 2",
            values.len()
        )));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if mean <= 0.0 {
        return Err(Error::invalid(format!(
            "label {label} has non-positive mean intensity {mean}"
        )));
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(var.sqrt() / mean)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TissueRow {
    pub label: u32,
    pub name: String,
    pub voxels: usize,
    pub cv_original: Option<f64>,
    pub cv_corrected: Option<f64>,
    /// Why a CV could not be computed.
    pub error: Option<String>,
}

impl TissueRow {
    /// `(corrected - original) / original`.
    pub fn relative_change(&self) -> Option<f64> {
        match (self.cv_original, self.cv_corrected) {
            (Some(o), Some(c)) if o > 0.0 => Some((c - o) / o),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fidelity {
    /// RMSE to the clean image over the foreground after scaling the image
    /// so its foreground mean equals the clean foreground mean.
    pub rmse_to_clean: f64,
    /// Pearson correlation between `original / image` and the true bias over
    /// the foreground; absent when either side has zero variance.
    pub bias_correlation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tissues: Vec<TissueRow>,
    pub mean_cv_original: Option<f64>,
    pub mean_cv_corrected: Option<f64>,
    pub original: Option<Fidelity>,
    pub corrected: Option<Fidelity>,
    /// Free-form description of how the corrected image was produced.
    pub config: Option<String>,
    /// Seconds since the Unix epoch when the report was built.
    pub created_unix: u64,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl EvalReport {
    /// Recomputes the mean CVs from the rows.
    pub fn recompute_totals(&mut self) {
        self.mean_cv_original = mean_of(self.tissues.iter().map(|r| r.cv_original));
        self.mean_cv_corrected = mean_of(self.tissues.iter().map(|r| r.cv_corrected));
    }

    /// Mean over tissues of the relative CV reduction `(orig - corr) / orig`.
    pub fn mean_relative_reduction(&self) -> Option<f64> {
        mean_of(self.tissues.iter().map(|r| r.relative_change().map(|c| -c)))
    }

    /// Aligned plain-text table, one row per tissue.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        let _ = writeln!(
            s,
            "{:<8} {:>8} {:>10} {:>10} {:>8}",
            "Tissue", "Voxels", "Original", "Corrected", "Change"
        );
        for r in &self.tissues {
            let change = r
                .relative_change()
                .map_or_else(|| "-".to_string(), |c| format!("{:+.1}%", 100.0 * c));
            let _ = write!(
                s,
                "{:<8} {:>8} {:>10} {:>10} {:>8}",
                r.name,
                r.voxels,
                fmt(r.cv_original),
                fmt(r.cv_corrected),
                change
            );
            if let Some(e) = &r.error {
                let _ = write!(s, "  error: {e}");
            }
            s.push('\n');
        }
        let _ = writeln!(
            s,
            "{:<8} {:>8} {:>10} {:>10}",
            "mean",
            "",
            fmt(self.mean_cv_original),
            fmt(self.mean_cv_corrected)
        );
        if let (Some(o), Some(c)) = (&self.original, &self.corrected) {
            let _ = writeln!(
                s,
                "{:<8} {:>8} {:>10} {:>10}",
                "rmse",
                "",
                format!("{:.4}", o.rmse_to_clean),
                format!("{:.4}", c.rmse_to_clean)
            );
            let _ = writeln!(
                s,
                "{:<8} {:>8} {:>10} {:>10}",
                "bias-r",
                "",
                fmt(o.bias_correlation),
                fmt(c.bias_correlation)
            );
        }
        s
    }
}

fn foreground(mask: &LabelMask) -> Vec<usize> {
    (0..mask.data.len())
        .filter(|&i| mask.label_at(i) != 0)
        .collect()
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    if a.len() < 2 {
        return None;
    }
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Mean-matched RMSE of `image` to `clean` and, when `true_bias` is given,
/// correlation of the implied bias `original / image` with it.
pub fn fidelity(
    image: &Volume,
    original: &Volume,
    clean: &Volume,
    true_bias: Option<&Volume>,
    mask: &LabelMask,
) -> Result<Fidelity> {
    for v in [image, original, clean].into_iter().chain(true_bias) {
        mask.check_matches(v)?;
    }
    let fg = foreground(mask);
    if fg.is_empty() {
        return Err(Error::invalid("mask has no foreground voxels"));
    }
    let (img, cln) = (image.data.data(), clean.data.data());
    let n = fg.len() as f64;
    let mi = fg.iter().map(|&i| img[i]).sum::<f64>() / n;
    let mc = fg.iter().map(|&i| cln[i]).sum::<f64>() / n;
    if mi == 0.0 {
        return Err(Error::invalid("image has zero foreground mean"));
    }
    let scale = mc / mi;
    let mse = fg
        .iter()
        .map(|&i| (scale * img[i] - cln[i]).powi(2))
        .sum::<f64>()
        / n;

    let bias_correlation = true_bias.and_then(|b| {
        let (orig, bias) = (original.data.data(), b.data.data());
        let (ratio, truth): (Vec<f64>, Vec<f64>) = fg
            .iter()
            .filter(|&&i| img[i].abs() >= RATIO_GUARD)
            .map(|&i| (orig[i] / img[i], bias[i]))
            .unzip();
        pearson(&ratio, &truth)
    });
    Ok(Fidelity {
        rmse_to_clean: mse.sqrt(),
        bias_correlation,
    })
}

/// CV per tissue for `original` and `corrected`; fidelity metrics when the
/// clean image is known. Per-tissue failures become error rows.
pub fn evaluate_correction(
    original: &Volume,
    corrected: &Volume,
    mask: &LabelMask,
    clean: Option<&Volume>,
    true_bias: Option<&Volume>,
) -> Result<EvalReport> {
    mask.check_matches(original)?;
    mask.check_matches(corrected)?;
    let tissues = mask
        .label_names
        .keys()
        .copied()
        .filter(|&l| l != 0)
        .map(|label| {
            let o = coefficient_of_variation(original, mask, label);
            let c = coefficient_of_variation(corrected, mask, label);
            let error = o.as_ref().err().or(c.as_ref().err()).map(|e| e.to_string());
            TissueRow {
                label,
                name: mask.name(label),
                voxels: mask.count(label),
                cv_original: o.ok(),
                cv_corrected: c.ok(),
                error,
            }
        })
        .collect();
    let (orig_fid, corr_fid) = match clean {
        Some(clean) => (
            Some(fidelity(original, original, clean, true_bias, mask)?),
            Some(fidelity(corrected, original, clean, true_bias, mask)?),
        ),
        None => (None, None),
    };
    let created_unix = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let mut report = EvalReport {
        tissues,
        mean_cv_original: None,
        mean_cv_corrected: None,
        original: orig_fid,
        corrected: corr_fid,
        config: None,
        created_unix,
    };
    report.recompute_totals();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use std::collections::BTreeMap;

    fn names(n: u32) -> BTreeMap<u32, String> {
        (1..=n).map(|l| (l, format!("t{l}"))).collect()
    }

    #[test]
    fn two_voxel_cv() {
        let v = Volume::from_tensor(Tensor::new(vec![1, 1, 3], vec![1.0, 3.0, 100.0]).unwrap())
            .unwrap();
        let m = LabelMask::new(
            Tensor::new(vec![1, 1, 3], vec![1.0, 1.0, 0.0]).unwrap(),
            names(1),
        )
        .unwrap();
        assert!((coefficient_of_variation(&v, &m, 1).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn constant_region_and_scale_invariance() {
        let v = Volume::from_tensor(Tensor::from_fn(&[2, 3, 4], |i| 1.0 + (i % 5) as f64)).unwrap();
        let m = LabelMask::new(
            Tensor::from_fn(&[2, 3, 4], |i| (i % 2) as f64 + 1.0),
            names(2),
        )
        .unwrap();
        let scaled = v.with_data(v.data.map(|x| 7.5 * x)).unwrap();
        for l in [1, 2] {
            let a = coefficient_of_variation(&v, &m, l).unwrap();
            let b = coefficient_of_variation(&scaled, &m, l).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
        let c = Volume::from_tensor(Tensor::full(&[2, 3, 4], 4.0)).unwrap();
        assert_eq!(coefficient_of_variation(&c, &m, 1).unwrap(), 0.0);
    }

    #[test]
    fn cv_errors() {
        let v = Volume::from_tensor(Tensor::zeros(&[1, 1, 4])).unwrap();
        let m = LabelMask::new(
            Tensor::new(vec![1, 1, 4], vec![1.0, 1.0, 2.0, 0.0]).unwrap(),
            names(3),
        )
        .unwrap();
        assert!(coefficient_of_variation(&v, &m, 1).is_err()); // zero mean
        assert!(coefficient_of_variation(&v, &m, 2).is_err()); // one voxel
        assert!(coefficient_of_variation(&v, &m, 3).is_err()); // absent
    }

    #[test]
    fn report_rows_and_perfect_correction() {
        let clean = Volume::from_tensor(Tensor::from_fn(&[2, 2, 4], |i| {
            if i % 4 < 2 {
                0.3
            } else {
                0.9
            }
        }))
        .unwrap();
        let m = LabelMask::new(
            Tensor::from_fn(&[2, 2, 4], |i| if i % 4 < 2 { 1.0 } else { 2.0 }),
            names(3),
        )
        .unwrap();
        let bias =
            Volume::from_tensor(Tensor::from_fn(&[2, 2, 4], |i| 0.8 + 0.05 * i as f64)).unwrap();
        let y = clean
            .with_data(clean.data.zip_map(&bias.data, |a, b| a * b).unwrap())
            .unwrap();
        let same = evaluate_correction(&y, &y, &m, Some(&clean), Some(&bias)).unwrap();
        for r in &same.tissues[..2] {
            assert_eq!(r.cv_original, r.cv_corrected);
        }
        assert!(same.tissues[2].error.is_some());
        assert!(same.original.unwrap().bias_correlation.is_none());

        let perfect = evaluate_correction(&y, &clean, &m, Some(&clean), Some(&bias)).unwrap();
        for r in &perfect.tissues[..2] {
            assert!(r.cv_corrected.unwrap() < 1e-12);
        }
        let fid = perfect.corrected.unwrap();
        assert!(fid.rmse_to_clean < 1e-15);
        assert!((fid.bias_correlation.unwrap() - 1.0).abs() < 1e-12);

        let mut r = perfect.clone();
        r.mean_cv_corrected = None;
        r.recompute_totals();
        assert_eq!(r, perfect);
        assert!(perfect.to_table().contains("t1"));
    }
}

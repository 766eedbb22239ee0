//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use zsbc_core::gradcheck::{self, GradcheckOptions};
use zsbc_core::synthetic::make_case;
use zsbc_core::volume::identity_affine;
use zsbc_core::{
    correct_volume, denormalize, evaluate_correction, hc_iterate, normalize, read_volume,
    write_volume, Architecture, BiasSpec, CorrectionConfig, PhantomSpec, Tensor, Volume,
};

const GRAD_BUDGET: Duration = Duration::from_secs(60);
const HC_TOL: f64 = 1e-12;
const HC_BUDGET: Duration = Duration::from_secs(5);
const IDENTITY_TOL: f64 = 1e-6;
const IDENTITY_BUDGET: Duration = Duration::from_secs(10);
const CV_REDUCTION_MIN: f64 = 0.30;
const RMSE_REDUCTION_MIN: f64 = 0.40;
const SEED_BUDGET: Duration = Duration::from_secs(120);
const NO_HARM_CV_MAX: f64 = 0.05;
const PARAM_MAX: usize = 4000;
const IO_BUDGET: Duration = Duration::from_secs(10);

struct Verdict {
    passed: bool,
    detail: String,
}

impl Verdict {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Verdict {
            passed,
            detail: detail.into(),
        }
    }
}

fn gradients() -> Verdict {
    let start = Instant::now();
    let report = match gradcheck::run_all(&GradcheckOptions::default()) {
        Ok(r) => r,
        Err(e) => return Verdict::new(false, format!("harness error: {e}")),
    };
    let elapsed = start.elapsed();
    let worst = report
        .iter()
        .max_by(|a, b| a.max_error.total_cmp(&b.max_error))
        .expect("ops registered");
    let failed: Vec<&str> = report
        .iter()
        .filter(|o| !o.passed)
        .map(|o| o.op.as_str())
        .collect();
    Verdict::new(
        failed.is_empty() && elapsed < GRAD_BUDGET,
        format!(
            "{} ops incl. end-to-end 8^3 loss; worst {} {:.2e}; failed {:?}; {:.1}s",
            report.len(),
            worst.op,
            worst.max_error,
            failed,
            elapsed.as_secs_f64()
        ),
    )
}

fn hc_oracle() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    let mut out_of_range = 0;
    for _ in 0..1000 {
        let i: f64 = rng.random_range(0.0..=1.0);
        let a: f64 = rng.random_range(-1.0..=1.0);
        let n = rng.random_range(1..=6);
        let mut expected = i;
        for _ in 0..n {
            expected += a * expected * (1.0 - expected);
        }
        let t = |v: f64| Tensor::new(vec![1], vec![v]).unwrap();
        let got = hc_iterate(&t(i), &t(a), n).unwrap().data()[0];
        if !(0.0..=1.0).contains(&got) {
            out_of_range += 1;
        }
        let err = if got == expected {
            0.0
        } else {
            (got - expected).abs() / expected.abs()
        };
        worst = worst.max(err);
    }
    let elapsed = start.elapsed();
    Verdict::new(
        worst <= HC_TOL && out_of_range == 0 && elapsed < HC_BUDGET,
        format!(
            "1000 triples; worst rel err {worst:.1e}; out of range {out_of_range}; {:.3}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn identity_start() -> Verdict {
    let start = Instant::now();
    let case = make_case(&PhantomSpec::default(), &BiasSpec::default(), 0.01, 0).unwrap();
    let cfg = CorrectionConfig {
        opt_steps: 1,
        learning_rate: 0.0,
        ..Default::default()
    };
    let result = correct_volume(&case.corrupted, &cfg).unwrap();
    let (unit, stats) = normalize(&case.corrupted).unwrap();
    let expected = denormalize(&unit, &stats);
    let worst = result
        .corrected
        .data
        .data()
        .iter()
        .zip(expected.data())
        .map(|(a, b)| (a - b).abs() / b.abs().max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max);
    let elapsed = start.elapsed();
    Verdict::new(
        worst <= IDENTITY_TOL && elapsed < IDENTITY_BUDGET,
        format!(
            "64^3; worst rel diff {worst:.1e}; {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn cv_reduction() -> Verdict {
    let mut ok = [true; 3];
    let mut parts = Vec::new();
    for seed in 0..3 {
        let start = Instant::now();
        let case = make_case(&PhantomSpec::default(), &BiasSpec::default(), 0.01, seed).unwrap();
        let result = correct_volume(&case.corrupted, &CorrectionConfig::default()).unwrap();
        let report = evaluate_correction(
            &case.corrupted,
            &result.corrected,
            &case.mask,
            Some(&case.clean),
            Some(&case.bias),
        )
        .unwrap();
        let elapsed = start.elapsed();

        let every_tissue = report
            .tissues
            .iter()
            .all(|r| matches!((r.cv_original, r.cv_corrected), (Some(o), Some(c)) if c < o));
        let reduction = report
            .mean_relative_reduction()
            .unwrap_or(f64::NEG_INFINITY);
        let rmse_before = report.original.unwrap().rmse_to_clean;
        let rmse_after = report.corrected.unwrap().rmse_to_clean;
        let rmse_reduction = 1.0 - rmse_after / rmse_before;
        let first = result.loss_trace[0].total;
        let last = result.final_loss.total;

        ok[0] &= every_tissue && reduction >= CV_REDUCTION_MIN;
        ok[1] &= rmse_reduction >= RMSE_REDUCTION_MIN;
        ok[2] &= last < first && elapsed < SEED_BUDGET;
        parts.push(format!(
            "seed {seed}: cv -{:.1}% (all tissues {}), rmse {:.4}->{:.4} ({:+.1}%), loss {:.4}->{:.4}, {:.1}s",
            100.0 * reduction,
            if every_tissue { "down" } else { "NOT down" },
            rmse_before,
            rmse_after,
            -100.0 * rmse_reduction,
            first,
            last,
            elapsed.as_secs_f64()
        ));
    }
    let tag = |b: bool| if b { "pass" } else { "FAIL" };
    let detail = format!(
        "(a) {} (b) {} (c) {} | {}",
        tag(ok[0]),
        tag(ok[1]),
        tag(ok[2]),
        parts.join("; ")
    );
    Verdict::new(ok.iter().all(|&b| b), detail)
}

fn no_harm() -> Verdict {
    let start = Instant::now();
    let bias = BiasSpec {
        strength: 0.0,
        ..Default::default()
    };
    let case = make_case(&PhantomSpec::default(), &bias, 0.0, 0).unwrap();
    let result = correct_volume(&case.corrupted, &CorrectionConfig::default()).unwrap();
    let report =
        evaluate_correction(&case.corrupted, &result.corrected, &case.mask, None, None).unwrap();
    let worst = report
        .tissues
        .iter()
        .map(|r| r.cv_corrected.unwrap_or(f64::INFINITY))
        .fold(0.0, f64::max);
    let elapsed = start.elapsed();
    Verdict::new(
        worst <= NO_HARM_CV_MAX && elapsed < SEED_BUDGET,
        format!(
            "worst corrected CV {worst:.2e}; {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn param_budget() -> Verdict {
    let n = Architecture::default().param_count();
    Verdict::new(n <= PARAM_MAX, format!("{n} trainable scalars"))
}

fn run_correct(input: &Path, dir: &Path) -> Vec<Vec<u8>> {
    let names = ["out.nii.gz", "bias.nii.gz", "trace.json", "params.bin"];
    let paths: Vec<_> = names.iter().map(|n| dir.join(n)).collect();
    let status = Command::new(env!("CARGO_BIN_EXE_zsbc"))
        .arg("correct")
        .arg("--input")
        .arg(input)
        .arg("--output")
        .arg(&paths[0])
        .arg("--bias-out")
        .arg(&paths[1])
        .arg("--trace-out")
        .arg(&paths[2])
        .arg("--params-out")
        .arg(&paths[3])
        .args(["--seed", "11"])
        .status()
        .unwrap();
    assert!(status.success());
    paths.iter().map(|p| std::fs::read(p).unwrap()).collect()
}

fn determinism() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let case = make_case(&PhantomSpec::default(), &BiasSpec::default(), 0.01, 5).unwrap();
    let input = tmp.path().join("y.nii.gz");
    write_volume(&case.corrupted, &input).unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    std::fs::create_dir_all(&a).unwrap();
    std::fs::create_dir_all(&b).unwrap();
    let start = Instant::now();
    let first = run_correct(&input, &a);
    let second = run_correct(&input, &b);
    let elapsed = start.elapsed();
    let identical = first == second;
    Verdict::new(
        identical && elapsed < 2 * SEED_BUDGET,
        format!(
            "4 output files {}; two runs {:.1}s",
            if identical {
                "byte-identical"
            } else {
                "DIFFER"
            },
            elapsed.as_secs_f64()
        ),
    )
}

fn io_round_trip() -> Verdict {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let f32v = |v: f64| v as f32 as f64;
    let mut mismatches = 0;
    for k in 0..20 {
        let shape = [0; 3].map(|_| rng.random_range(1..20));
        let data = Tensor::from_fn(&shape, |_| f32v(rng.random_range(-1e4..1e4)));
        let spacing = [0; 3].map(|_| f32v(rng.random_range(0.1..5.0)));
        let mut affine = identity_affine(spacing);
        for row in affine.iter_mut().take(3) {
            for v in row.iter_mut() {
                *v = f32v(*v + rng.random_range(-0.5..0.5));
            }
        }
        let v = Volume::new(data, spacing, affine).unwrap();
        let path = tmp.path().join(if k % 2 == 0 {
            format!("{k}.nii")
        } else {
            format!("{k}.nii.gz")
        });
        write_volume(&v, &path).unwrap();
        let r = read_volume(&path).unwrap();
        if r.data != v.data || r.spacing != v.spacing || r.affine != v.affine {
            mismatches += 1;
        }
    }
    let elapsed = start.elapsed();
    Verdict::new(
        mismatches == 0 && elapsed < IO_BUDGET,
        format!(
            "20 volumes, {mismatches} mismatches; {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn main() {
    // libtest flags such as --nocapture are accepted and ignored.
    let mut all = true;
    let mut report = |id: &str, name: &str, v: Verdict| {
        all &= v.passed;
        println!(
            "criterion {id} {:<24} {}  {}",
            name,
            if v.passed { "PASS" } else { "FAIL" },
            v.detail
        );
    };
    report("1", "gradient check", gradients());
    report("2", "hc recurrence oracle", hc_oracle());
    report("3", "identity start", identity_start());
    report("4", "synthetic cv reduction", cv_reduction());
    report("5", "zero-bias no-harm", no_harm());
    report("6", "parameter budget", param_budget());
    report("7", "determinism", determinism());
    report("8", "nifti round trip", io_round_trip());
    if !all {
        std::process::exit(1);
    }
}

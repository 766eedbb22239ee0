use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use zsbc_core::{read_volume, write_volume, Tensor, Volume};

fn zsbc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zsbc"))
        .args(args)
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn simulate(dir: &Path, extra: &[&str]) -> PathBuf {
    let out = dir.join("sim");
    let mut args = vec!["simulate", "--out-dir", s(&out), "--shape", "24"];
    args.extend_from_slice(extra);
    let o = zsbc(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn missing_input_is_a_usage_error() {
    let o = zsbc(&["correct", "--output", "x.nii"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(zsbc(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(zsbc(&["--help"]).status.code(), Some(0));
}

#[test]
fn simulate_writes_five_deterministic_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let da = simulate(a.path(), &["--seed", "4"]);
    let db = simulate(b.path(), &["--seed", "4"]);
    let names = [
        "clean.nii.gz",
        "bias.nii.gz",
        "corrupted.nii.gz",
        "mask.nii.gz",
        "spec.json",
    ];
    assert_eq!(std::fs::read_dir(&da).unwrap().count(), 5);
    for n in names {
        assert_eq!(
            std::fs::read(da.join(n)).unwrap(),
            std::fs::read(db.join(n)).unwrap(),
            "{n}"
        );
    }
    let spec: serde_json::Value =
        serde_json::from_slice(&std::fs::read(da.join("spec.json")).unwrap()).unwrap();
    assert_eq!(spec["seed"], 4);
    assert_eq!(spec["labels"]["2"], "GM");
}

#[test]
fn zero_bias_zero_noise_reproduces_clean() {
    let t = tempfile::tempdir().unwrap();
    let d = simulate(t.path(), &["--bias-strength", "0", "--noise", "0"]);
    let clean = read_volume(d.join("clean.nii.gz")).unwrap();
    let y = read_volume(d.join("corrupted.nii.gz")).unwrap();
    assert_eq!(clean.data, y.data);
    assert_eq!(
        zsbc(&["simulate", "--out-dir", s(&d), "--shape", "8"])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn correct_writes_all_outputs() {
    let t = tempfile::tempdir().unwrap();
    let d = simulate(t.path(), &[]);
    let out = t.path().join("out.nii.gz");
    let bias = t.path().join("bias.nii");
    let trace = t.path().join("trace.json");
    let params = t.path().join("params.bin");
    let o = zsbc(&[
        "correct",
        "--input",
        s(&d.join("corrupted.nii.gz")),
        "--output",
        s(&out),
        "--bias-out",
        s(&bias),
        "--trace-out",
        s(&trace),
        "--params-out",
        s(&params),
        "--iters",
        "3",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("elapsed") && err.contains("final loss"));
    let input = read_volume(d.join("corrupted.nii.gz")).unwrap();
    let corrected = read_volume(&out).unwrap();
    assert_eq!(corrected.shape(), input.shape());
    assert_eq!(corrected.affine, input.affine);
    let b = read_volume(&bias).unwrap();
    assert!(b.data.min() > 0.0 && b.data.max() < 1.0);
    let steps: Vec<serde_json::Value> =
        serde_json::from_slice(&std::fs::read(&trace).unwrap()).unwrap();
    assert_eq!(steps.len(), 3);
    for key in ["smo_alpha", "spa", "exp", "fidelity", "smo_bias", "total"] {
        assert!(steps[0][key].is_number(), "{key}");
    }
    assert_eq!(std::fs::metadata(&params).unwrap().len(), 2702 * 4);
}

#[test]
fn explicit_defaults_match_implicit_ones() {
    let t = tempfile::tempdir().unwrap();
    let d = simulate(t.path(), &[]);
    let input = d.join("corrupted.nii.gz");
    let (a, b) = (t.path().join("a.nii"), t.path().join("b.nii"));
    assert!(zsbc(&["correct", "--input", s(&input), "--output", s(&a)])
        .status
        .success());
    let o = zsbc(&[
        "correct",
        "--input",
        s(&input),
        "--output",
        s(&b),
        "--iters",
        "100",
        "--lr",
        "0.005",
        "--seed",
        "0",
    ]);
    assert!(o.status.success());
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn config_file_is_overridden_by_flags() {
    let t = tempfile::tempdir().unwrap();
    let d = simulate(t.path(), &[]);
    let input = d.join("corrupted.nii.gz");
    let cfg = t.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"opt_steps": 2, "neighborhood": "full26", "spa_region": 2}"#,
    )
    .unwrap();
    let out = t.path().join("o.nii");
    let trace = t.path().join("t.json");
    let run = |extra: &[&str]| {
        let mut args = vec![
            "correct",
            "--input",
            s(&input),
            "--output",
            s(&out),
            "--trace-out",
            s(&trace),
            "--config",
            s(&cfg),
        ];
        args.extend_from_slice(extra);
        let o = zsbc(&args);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        serde_json::from_slice::<Vec<serde_json::Value>>(&std::fs::read(&trace).unwrap())
            .unwrap()
            .len()
    };
    assert_eq!(run(&[]), 2);
    assert_eq!(run(&["--iters", "4"]), 4);

    std::fs::write(&cfg, r#"{"opt_step": 2}"#).unwrap();
    let o = zsbc(&[
        "correct",
        "--input",
        s(&input),
        "--output",
        s(&out),
        "--config",
        s(&cfg),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn correct_error_codes() {
    let t = tempfile::tempdir().unwrap();
    let out = t.path().join("o.nii");
    let missing = t.path().join("missing.nii");
    assert_eq!(
        zsbc(&["correct", "--input", s(&missing), "--output", s(&out)])
            .status
            .code(),
        Some(2)
    );

    let flat = t.path().join("flat.nii");
    write_volume(
        &Volume::from_tensor(Tensor::full(&[16, 16, 16], 2.0)).unwrap(),
        &flat,
    )
    .unwrap();
    assert_eq!(
        zsbc(&["correct", "--input", s(&flat), "--output", s(&out)])
            .status
            .code(),
        Some(3)
    );

    let d = simulate(t.path(), &[]);
    let input = d.join("corrupted.nii.gz");
    let o = zsbc(&[
        "correct",
        "--input",
        s(&input),
        "--output",
        s(&out),
        "--iters",
        "3",
        "--lr",
        "1e300",
    ]);
    assert_eq!(
        o.status.code(),
        Some(4),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let o = zsbc(&[
        "correct",
        "--input",
        s(&input),
        s(&input),
        "--output",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let o = zsbc(&[
        "correct",
        "--input",
        s(&input),
        "--output",
        s(&out),
        "--lr",
        "-1",
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn parallel_jobs_match_sequential_runs() {
    let t = tempfile::tempdir().unwrap();
    let d1 = simulate(&t.path().join("1"), &["--seed", "1"]);
    let d2 = simulate(&t.path().join("2"), &["--seed", "2"]);
    let (i1, i2) = (d1.join("corrupted.nii.gz"), d2.join("corrupted.nii.gz"));
    let p: Vec<PathBuf> = ["p1", "p2", "s1", "s2"]
        .iter()
        .map(|n| t.path().join(format!("{n}.nii")))
        .collect();
    let o = zsbc(&[
        "correct",
        "--input",
        s(&i1),
        s(&i2),
        "--output",
        s(&p[0]),
        s(&p[1]),
        "--jobs",
        "2",
        "--iters",
        "5",
    ]);
    assert!(o.status.success());
    assert!(zsbc(&[
        "correct",
        "--input",
        s(&i1),
        "--output",
        s(&p[2]),
        "--iters",
        "5"
    ])
    .status
    .success());
    assert!(zsbc(&[
        "correct",
        "--input",
        s(&i2),
        "--output",
        s(&p[3]),
        "--iters",
        "5"
    ])
    .status
    .success());
    assert_eq!(std::fs::read(&p[0]).unwrap(), std::fs::read(&p[2]).unwrap());
    assert_eq!(std::fs::read(&p[1]).unwrap(), std::fs::read(&p[3]).unwrap());
}

#[test]
fn evaluate_table_json_and_missing_labels() {
    let t = tempfile::tempdir().unwrap();
    let d = simulate(t.path(), &[]);
    let y = d.join("corrupted.nii.gz");
    let json = t.path().join("r.json");
    let o = zsbc(&[
        "evaluate",
        "--image",
        s(&y),
        "--corrected",
        s(&y),
        "--mask",
        s(&d.join("mask.nii.gz")),
        "--clean",
        s(&d.join("clean.nii.gz")),
        "--json-out",
        s(&json),
    ]);
    assert!(o.status.success());
    let table = String::from_utf8_lossy(&o.stdout).to_string();
    for line in table
        .lines()
        .filter(|l| ["CSF", "GM", "WM"].iter().any(|n| l.starts_with(n)))
    {
        let cols: Vec<&str> = line.split_whitespace().collect();
        assert_eq!(cols[2], cols[3], "{line}");
    }
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(&json).unwrap()).unwrap();
    let keys: Vec<&str> = r.as_object().unwrap().keys().map(|k| k.as_str()).collect();
    assert_eq!(
        keys,
        [
            "config",
            "corrected",
            "created_unix",
            "mean_cv_corrected",
            "mean_cv_original",
            "original",
            "tissues"
        ]
    );
    assert_eq!(r["tissues"].as_array().unwrap().len(), 3);
    assert!(r["corrected"]["rmse_to_clean"].is_number());

    let o = zsbc(&[
        "evaluate",
        "--image",
        s(&y),
        "--corrected",
        s(&y),
        "--mask",
        s(&d.join("mask.nii.gz")),
        "--labels",
        "1=CSF,2=GM,3=WM,7=lesion",
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stderr).contains("warning: lesion"));
    assert!(String::from_utf8_lossy(&o.stdout).contains("lesion"));

    let o = zsbc(&[
        "evaluate",
        "--image",
        s(&y),
        "--corrected",
        s(&y),
        "--mask",
        s(&d.join("mask.nii.gz")),
        "--labels",
        "1=CSF",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_lists_every_op_once() {
    let o = zsbc(&["gradcheck"]);
    assert_eq!(o.status.code(), Some(0));
    let out = String::from_utf8_lossy(&o.stdout);
    for op in zsbc_core::gradcheck::OPS {
        assert_eq!(
            out.lines()
                .filter(|l| l.split_whitespace().next() == Some(op))
                .count(),
            1,
            "{op}"
        );
    }
    let o = zsbc(&["gradcheck", "--corrupt", "conv3d_pointwise", "--seed", "3"]);
    assert_eq!(o.status.code(), Some(5));
    assert!(String::from_utf8_lossy(&o.stderr).contains("conv3d_pointwise"));
}

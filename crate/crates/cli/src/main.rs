//! `zsbc`: zero-shot bias-field correction from the command line.
//!
//! Exit codes: 0 success, 1 invalid arguments, 2 I/O or file-format error,
//! 3 degenerate input, 4 optimization diverged, 5 gradient check failed.

mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use zsbc_core::gradcheck::{self, GradcheckOptions};
use zsbc_core::synthetic::{make_case, SyntheticCase};
use zsbc_core::{
    correct_volume, evaluate_correction, read_mask, read_volume, write_mask, write_volume,
    BiasSpec, CorrectionConfig, Error, PhantomSpec,
};

use crate::config::{FlatConfig, LoadError};

#[derive(Parser)]
#[command(
    name = "zsbc",
    version,
    about = "Zero-shot bias-field correction for 3-D MR volumes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Correct one or more NIfTI volumes.
    Correct(CorrectArgs),
    /// Write a synthetic phantom, bias field, corrupted image and mask.
    Simulate(SimulateArgs),
    /// Per-tissue coefficient of variation before and after correction.
    Evaluate(EvaluateArgs),
    /// Finite-difference check of every analytic gradient.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct CorrectArgs {
    /// Input volumes (.nii or .nii.gz).
    #[arg(long, required = true, num_args = 1..)]
    input: Vec<PathBuf>,
    /// Corrected outputs, one per input.
    #[arg(long, required = true, num_args = 1..)]
    output: Vec<PathBuf>,
    /// Predicted bias maps, one per input.
    #[arg(long, num_args = 1..)]
    bias_out: Vec<PathBuf>,
    /// Per-step loss traces as JSON, one per input.
    #[arg(long, num_args = 1..)]
    trace_out: Vec<PathBuf>,
    /// Optimized network weights as flat little-endian f32, one per input.
    #[arg(long, num_args = 1..)]
    params_out: Vec<PathBuf>,
    /// Optimization steps.
    #[arg(long)]
    iters: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Weight-initialization seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Flat JSON config file; flags take precedence over its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Volumes corrected concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    out_dir: PathBuf,
    /// Volume extent: `N` or `D,H,W`.
    #[arg(long, default_value = "64", value_parser = parse_shape)]
    shape: [usize; 3],
    #[arg(long, default_value_t = 0.3)]
    bias_strength: f64,
    /// Standard deviation of the additive Gaussian noise.
    #[arg(long, default_value_t = 0.01)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Uncorrected image.
    #[arg(long)]
    image: PathBuf,
    /// Corrected image.
    #[arg(long)]
    corrected: PathBuf,
    /// Tissue label image.
    #[arg(long)]
    mask: PathBuf,
    /// Ground-truth clean image, enabling the RMSE rows.
    #[arg(long)]
    clean: Option<PathBuf>,
    /// Ground-truth bias field, enabling the correlation rows.
    #[arg(long)]
    true_bias: Option<PathBuf>,
    /// Label names as `1=CSF,2=GM,3=WM`.
    #[arg(long, default_value = "1=CSF,2=GM,3=WM", value_parser = parse_labels)]
    labels: BTreeMap<u32, String>,
    #[arg(long)]
    json_out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Largest spatial extent of the random instances.
    #[arg(long, default_value_t = 8)]
    size: usize,
    /// Perturb the analytic gradient of one op (negative control).
    #[arg(long, hide = true)]
    corrupt: Option<String>,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Failure {
            code,
            message: message.into(),
        }
    }

    fn invalid(message: impl Into<String>) -> Self {
        Failure::new(1, message)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InvalidArgument(_) | Error::ShapeMismatch { .. } => 1,
            Error::Io { .. }
            | Error::MalformedHeader(_)
            | Error::NotThreeD(_)
            | Error::UnsupportedDatatype(_)
            | Error::NonIntegerMask { .. }
            | Error::UnknownLabel(_) => 2,
            Error::DegenerateInput(_) => 3,
            Error::Diverged { .. } => 4,
        };
        Failure::new(code, e.to_string())
    }
}

fn parse_shape(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split([',', 'x'])
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [n] => Ok([n; 3]),
        [d, h, w] => Ok([d, h, w]),
        _ => Err("expected N or D,H,W".into()),
    }
}

fn parse_labels(s: &str) -> Result<BTreeMap<u32, String>, String> {
    s.split(',')
        .map(|item| {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| format!("{item:?} is not label=name"))?;
            let k: u32 = k.trim().parse().map_err(|e| format!("{k:?}: {e}"))?;
            if k == 0 {
                return Err("label 0 is background".into());
            }
            Ok((k, v.trim().to_string()))
        })
        .collect()
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Failure::new(2, format!("{}: {e}", path.display())))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

fn resolve_config(args: &CorrectArgs) -> Result<CorrectionConfig, Failure> {
    let flat = match &args.config {
        Some(path) => config::load(path).map_err(|e| match e {
            LoadError::Io(e) => Failure::new(2, format!("{}: {e}", path.display())),
            LoadError::Parse(e) => Failure::invalid(format!("{}: {e}", path.display())),
        })?,
        None => FlatConfig::default(),
    };
    let mut cfg = CorrectionConfig::from(flat);
    if let Some(n) = args.iters {
        cfg.opt_steps = n;
    }
    if let Some(lr) = args.lr {
        cfg.learning_rate = lr;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

struct Job<'a> {
    input: &'a Path,
    output: &'a Path,
    bias_out: Option<&'a Path>,
    trace_out: Option<&'a Path>,
    params_out: Option<&'a Path>,
}

fn per_input<'a>(
    name: &str,
    paths: &'a [PathBuf],
    n: usize,
) -> Result<Vec<Option<&'a Path>>, Failure> {
    match paths.len() {
        0 => Ok(vec![None; n]),
        k if k == n => Ok(paths.iter().map(|p| Some(p.as_path())).collect()),
        k => Err(Failure::invalid(format!(
            "--{name} got {k} paths for {n} inputs"
        ))),
    }
}

fn run_job(job: &Job, cfg: &CorrectionConfig) -> Result<(), Failure> {
    let volume = read_volume(job.input)?;
    let result = correct_volume(&volume, cfg)?;
    write_volume(&result.corrected, job.output)?;
    if let Some(p) = job.bias_out {
        write_volume(&result.bias, p)?;
    }
    if let Some(p) = job.trace_out {
        write_text(p, &to_json(&result.loss_trace))?;
    }
    if let Some(p) = job.params_out {
        std::fs::write(p, result.params.to_le_bytes())
            .map_err(|e| Failure::new(2, format!("{}: {e}", p.display())))?;
    }
    eprintln!(
        "{}: elapsed {:.2} s, final loss {:.6}",
        job.input.display(),
        result.elapsed_seconds,
        result.final_loss.total
    );
    Ok(())
}

fn cmd_correct(args: CorrectArgs) -> Result<(), Failure> {
    let n = args.input.len();
    if args.output.len() != n {
        return Err(Failure::invalid(format!(
            "--output got {} paths for {n} inputs",
            args.output.len()
        )));
    }
    if args.jobs == 0 {
        return Err(Failure::invalid("--jobs must be >= 1"));
    }
    let cfg = resolve_config(&args)?;
    let bias = per_input("bias-out", &args.bias_out, n)?;
    let trace = per_input("trace-out", &args.trace_out, n)?;
    let params = per_input("params-out", &args.params_out, n)?;
    let jobs: Vec<Job> = (0..n)
        .map(|i| Job {
            input: &args.input[i],
            output: &args.output[i],
            bias_out: bias[i],
            trace_out: trace[i],
            params_out: params[i],
        })
        .collect();

    let next = AtomicUsize::new(0);
    let results: Vec<Mutex<Option<Result<(), Failure>>>> =
        (0..n).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..args.jobs.min(n) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(job) = jobs.get(i) else { break };
                let r = run_job(job, &cfg);
                *results[i].lock().expect("job result lock") = Some(r);
            });
        }
    });

    let mut first_failure = None;
    for (job, slot) in jobs.iter().zip(results) {
        if let Some(Err(f)) = slot.into_inner().expect("job result lock") {
            eprintln!("{}: {}", job.input.display(), f.message);
            first_failure.get_or_insert(f.code);
        }
    }
    match first_failure {
        Some(code) => Err(Failure::new(code, "correction failed")),
        None => Ok(()),
    }
}

#[derive(Serialize)]
struct SimulationRecord {
    seed: u64,
    noise_sigma: f64,
    phantom: PhantomSpec,
    bias: BiasSpec,
    labels: BTreeMap<u32, String>,
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), Failure> {
    if !(args.noise.is_finite() && args.noise >= 0.0) {
        return Err(Failure::invalid("--noise must be finite and >= 0"));
    }
    let phantom = PhantomSpec {
        shape: args.shape,
        seed: args.seed,
        ..Default::default()
    };
    let bias = BiasSpec {
        strength: args.bias_strength,
        seed: args.seed.wrapping_add(1),
        ..Default::default()
    };
    let SyntheticCase {
        clean,
        bias: field,
        corrupted,
        mask,
    } = make_case(&phantom, &bias, args.noise, args.seed)?;
    std::fs::create_dir_all(&args.out_dir)
        .map_err(|e| Failure::new(2, format!("{}: {e}", args.out_dir.display())))?;
    let dir = &args.out_dir;
    write_volume(&clean, dir.join("clean.nii.gz"))?;
    write_volume(&field, dir.join("bias.nii.gz"))?;
    write_volume(&corrupted, dir.join("corrupted.nii.gz"))?;
    write_mask(&mask, &clean, dir.join("mask.nii.gz"))?;
    let record = SimulationRecord {
        seed: args.seed,
        noise_sigma: args.noise,
        labels: phantom.label_names(),
        phantom,
        bias,
    };
    write_text(&dir.join("spec.json"), &to_json(&record))?;
    log::info!("wrote simulation to {}", dir.display());
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<(), Failure> {
    let image = read_volume(&args.image)?;
    let corrected = read_volume(&args.corrected)?;
    let mask = read_mask(&args.mask, &args.labels, Some(&image))?;
    let clean = args.clean.as_ref().map(read_volume).transpose()?;
    let true_bias = args.true_bias.as_ref().map(read_volume).transpose()?;
    let mut report = evaluate_correction(
        &image,
        &corrected,
        &mask,
        clean.as_ref(),
        true_bias.as_ref(),
    )?;
    report.config = Some(format!(
        "image={} corrected={} mask={}",
        args.image.display(),
        args.corrected.display(),
        args.mask.display()
    ));
    report.created_unix = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    for row in &report.tissues {
        if let Some(e) = &row.error {
            eprintln!("warning: {} (label {}): {e}", row.name, row.label);
        }
    }
    print!("{}", report.to_table());
    if let Some(p) = &args.json_out {
        write_text(p, &to_json(&report))?;
    }
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<(), Failure> {
    if args.size < 2 {
        return Err(Failure::invalid("--size must be >= 2"));
    }
    let opts = GradcheckOptions {
        seed: args.seed,
        size: args.size,
        corrupt: args.corrupt,
        ..Default::default()
    };
    let report = gradcheck::run_all(&opts)?;
    println!(
        "{:<26} {:>12} {:>8} {:>8}  result",
        "op", "max_rel_err", "checked", "skipped"
    );
    for o in &report {
        println!(
            "{:<26} {:>12.3e} {:>8} {:>8}  {}",
            o.op,
            o.max_error,
            o.checked,
            o.skipped,
            if o.passed { "ok" } else { "FAIL" }
        );
    }
    let failed: Vec<&str> = report
        .iter()
        .filter(|o| !o.passed)
        .map(|o| o.op.as_str())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::new(
            5,
            format!("gradient check failed: {}", failed.join(", ")),
        ))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let outcome = match cli.command {
        Command::Correct(a) => cmd_correct(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

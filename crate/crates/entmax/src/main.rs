use std::io::Read as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use entmax::config::FlatConfig;
use entmax::gradcheck::{block_gradcheck, run_gradcheck, BlockDims, GradcheckOptions};
use entmax::harness::{train_with_progress, write_run_dir, PiMode, RunConfig, Task};
use entmax::io;
use entmax::{Error, Result};
use entmax_core::analysis::{MetricReport, ReportOptions};
use entmax_core::transforms::DEFAULT_TOL;
use serde_json::json;

#[derive(Parser)]
#[command(name = "entmax", version, about = "Sparse α-entmax attention toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Apply α-entmax to a JSON vector or batch of vectors.
    Transform {
        #[arg(long)]
        alpha: f64,
        /// JSON file, or `-` for stdin.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TOL)]
        tol: f64,
    },
    /// Compare analytic gradients with finite differences on random inputs.
    Gradcheck {
        #[arg(long)]
        alpha: f64,
        #[arg(long, default_value_t = 8)]
        dim: usize,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also check a small multi-head block end to end.
        #[arg(long)]
        block: bool,
    },
    /// Train the toy model and write a run directory.
    Train {
        /// Flat `key = value` config file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override a config key; repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        task: Option<Task>,
        #[arg(long)]
        pi_mode: Option<PiMode>,
        #[arg(long)]
        steps: Option<u64>,
        /// Seeds both the data and the model.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute interpretability metrics from dumped attention tensors.
    Analyze {
        #[arg(long)]
        tensors: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Directory for per-metric CSV files.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Weights above this count as attended; use 1e-9 for imported
        /// softmax maps.
        #[arg(long, default_value_t = 0.0)]
        eps: f64,
        /// JSON list of cluster partitions, one per tensor file.
        #[arg(long)]
        clusters: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "-1,0,1")]
        offsets: Vec<i64>,
    },
}

enum Outcome {
    Success,
    CheckFailed,
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    print!("{}", io::to_json_string(value)?);
    Ok(())
}

fn transform(alpha: f64, input: &Path, tol: f64) -> Result<Outcome> {
    let text = if input == Path::new("-") {
        let mut s = String::new();
        std::io::stdin()
            .read_to_string(&mut s)
            .map_err(|e| Error::Io { path: input.into(), source: e })?;
        s
    } else {
        io::read_text(input)?
    };
    let parsed = io::parse_transform_input(&text)?;
    print_json(&io::run_transform(&parsed, alpha, tol)?)?;
    Ok(Outcome::Success)
}

fn gradcheck(alpha: f64, dim: usize, trials: usize, seed: u64, block: bool) -> Result<Outcome> {
    let report = run_gradcheck(&GradcheckOptions::new(alpha, dim, trials, seed))?;
    for t in &report.trials {
        eprintln!(
            "trial {:>4}  score {:.3e}  alpha {:.3e}  sum {:+.1e}  {}",
            t.trial,
            t.score_rel_err,
            t.alpha_rel_err,
            t.alpha_sum,
            if t.passed { "ok" } else { "FAIL" }
        );
    }
    let mut passed = report.passed;
    let block_report = if block {
        let r = block_gradcheck(BlockDims::default(), seed)?;
        eprintln!("block max relative error {:.3e}", r.max_rel_err);
        passed &= r.passed;
        Some(r)
    } else {
        None
    };
    eprintln!(
        "{}: max score {:.3e} (tol {:e}), max alpha {:.3e} (tol {:e})",
        if passed { "PASS" } else { "FAIL" },
        report.max_score_rel_err,
        report.score_tol,
        report.max_alpha_rel_err,
        report.alpha_tol
    );
    print_json(&json!({ "passed": passed, "entmax": report, "block": block_report }))?;
    Ok(if passed { Outcome::Success } else { Outcome::CheckFailed })
}

#[allow(clippy::too_many_arguments)]
fn train(
    config: Option<PathBuf>,
    overrides: Vec<String>,
    task: Option<Task>,
    pi_mode: Option<PiMode>,
    steps: Option<u64>,
    seed: Option<u64>,
    out: PathBuf,
) -> Result<Outcome> {
    let mut flat = match config {
        Some(path) => FlatConfig::parse(&io::read_text(&path)?)?,
        None => FlatConfig::new(),
    };
    for o in &overrides {
        let (k, v) = FlatConfig::parse_override(o)?;
        flat.set(k, v);
    }
    let mut run = RunConfig::from_flat(&flat)?;
    if let Some(t) = task {
        run.task.task = t;
    }
    if let Some(p) = pi_mode {
        run.train.pi_mode = p;
    }
    if let Some(s) = steps {
        run.train.steps = s;
    }
    if let Some(s) = seed {
        run.task.seed = s;
        run.train.seed = s;
    }
    run.validate()?;
    eprintln!(
        "training {} on {} for {} steps (seed {})",
        run.train.pi_mode, run.task.task, run.train.steps, run.train.seed
    );
    let log_every = run.train.log_every;
    let outcome = train_with_progress(&run, |p| {
        if p.step % log_every == 0 {
            let alphas: Vec<String> =
                p.alphas.iter().flatten().map(|a| format!("{a:.3}")).collect();
            eprintln!(
                "step {:>6}  loss {:.4}  {:.0} tok/s  alpha [{}]",
                p.step,
                p.loss,
                p.tokens_per_sec,
                alphas.join(" ")
            );
        }
    })?;
    write_run_dir(&out, &run, &outcome)?;
    eprintln!(
        "eval loss {:.4} -> {:.4}, accuracy {:.3}; wrote {}",
        outcome.initial.loss,
        outcome.last.loss,
        outcome.last.accuracy,
        out.display()
    );
    print_json(&json!({
        "out": out,
        "steps": run.train.steps,
        "initial_eval_loss": outcome.initial.loss,
        "final_eval_loss": outcome.last.loss,
        "eval_accuracy": outcome.last.accuracy,
        "tokens_per_sec": outcome.tokens_per_sec,
        "alphas": outcome.model.alphas(),
        "densities": outcome.report.densities,
    }))?;
    Ok(Outcome::Success)
}

fn analyze(
    dir: &Path,
    out: &Path,
    csv: Option<PathBuf>,
    eps: f64,
    clusters: Option<PathBuf>,
    offsets: Vec<i64>,
) -> Result<Outcome> {
    if eps.is_nan() || eps < 0.0 {
        return Err(Error::InvalidInput(format!("--eps must be non-negative, got {eps}")));
    }
    let tensors: Vec<_> = io::read_tensor_dir(dir)?.into_iter().map(|(_, t)| t).collect();
    let clusters: Option<Vec<Vec<Vec<usize>>>> = clusters.map(|p| io::read_json(&p)).transpose()?;
    let opts = ReportOptions { density_eps: eps, offsets };
    let report = MetricReport::from_tensors(&tensors, &opts, clusters.as_deref())?;
    io::write_json(out, &report)?;
    if let Some(csv_dir) = csv {
        std::fs::create_dir_all(&csv_dir)
            .map_err(|e| Error::Io { path: csv_dir.clone(), source: e })?;
        for (stem, text) in io::metrics_csv_by_metric(&report) {
            io::write_text(&csv_dir.join(format!("{stem}.csv")), &text)?;
        }
    }
    eprintln!("analyzed {} tensors from {}", tensors.len(), dir.display());
    print_json(&report)?;
    Ok(Outcome::Success)
}

fn run(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::Transform { alpha, input, tol } => transform(alpha, &input, tol),
        Command::Gradcheck { alpha, dim, trials, seed, block } => {
            gradcheck(alpha, dim, trials, seed, block)
        }
        Command::Train { config, overrides, task, pi_mode, steps, seed, out } => {
            train(config, overrides, task, pi_mode, steps, seed, out)
        }
        Command::Analyze { tensors, out, csv, eps, clusters, offsets } => {
            analyze(&tensors, &out, csv, eps, clusters, offsets)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(Outcome::Success) => ExitCode::SUCCESS,
        Ok(Outcome::CheckFailed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            let usage = e.is_usage()
                || matches!(
                    e,
                    Error::Core(
                        entmax_core::Error::InvalidAlpha(_)
                            | entmax_core::Error::InvalidTolerance(_)
                            | entmax_core::Error::EmptyInput
                            | entmax_core::Error::NonFiniteScore { .. }
                    )
                );
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}

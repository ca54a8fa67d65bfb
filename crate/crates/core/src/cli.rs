//! Command-line front end. Exit codes: 0 pass, 1 check failure, 2 usage error.

use std::ffi::OsString;
use std::fs::File;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::arch::{parse_file, ArchFile};
use crate::chain::ParamVector;
use crate::error::{Error, Result};
use crate::report::{compare, gradcheck, oracle_bench, smoothness_report, write_bench_csv};
use crate::smoothness::BoundedDomain;
use crate::trainer::{train_pgd, train_sgd, StepPolicy, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "chainopt", version, about = "Oracles and smoothness certificates for chains of computations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Propagate smoothness constants through an architecture.
    Smoothness(SmoothnessArgs),
    /// Compare backward gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Time DP, dual-CG and dense oracle solvers and check agreement.
    OracleBench(BenchArgs),
    /// Projected (stochastic) gradient descent on synthetic data.
    Train(TrainArgs),
}

#[derive(Debug, Args)]
pub struct SmoothnessArgs {
    pub arch: PathBuf,
    /// Radius of every parameter ball.
    #[arg(long)]
    pub radius: Option<f64>,
    #[arg(long)]
    pub input_norm: Option<f64>,
    /// Batch size m.
    #[arg(long)]
    pub batch: Option<usize>,
    /// Batch-norm epsilon override.
    #[arg(long)]
    pub eps: Option<f64>,
    /// Second architecture to compare against.
    #[arg(long)]
    pub compare: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    pub arch: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = vec![1, 2, 4, 8, 16])]
    pub taus: Vec<usize>,
    #[arg(long, default_value_t = 4)]
    pub width: usize,
    #[arg(long, default_value_t = 2)]
    pub batch: usize,
    #[arg(long, default_value_t = 1.0)]
    pub kappa: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("step").required(true).args(["gamma", "certified"]))]
pub struct TrainArgs {
    pub arch: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Step size from the certified smoothness constant.
    #[arg(long)]
    pub certified: bool,
    /// Mini-batch size; 0 for full batch.
    #[arg(long, default_value_t = 0)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.0)]
    pub tol: f64,
    /// Trace CSV destination.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

enum Outcome {
    Pass,
    Fail,
}

fn load(path: &PathBuf, batch: Option<usize>, radius: Option<f64>, input_norm: Option<f64>, eps: Option<f64>) -> Result<ArchFile> {
    let mut a = parse_file(path)?;
    if let Some(m) = batch {
        a = a.with_batch(m)?;
    }
    if radius.is_some() || input_norm.is_some() {
        let radii = match radius {
            Some(r) => vec![r; a.spec.len()],
            None => a.domain.radii.clone(),
        };
        a.domain = BoundedDomain::new(radii, input_norm.unwrap_or(a.domain.input_norm))?;
    }
    if let Some(e) = eps {
        a = a.with_batchnorm_eps(e)?;
    }
    Ok(a)
}

fn io_err(e: std::io::Error) -> Error {
    Error::Invalid(format!("io: {e}"))
}

fn smoothness(args: &SmoothnessArgs, out: &mut dyn Write) -> Result<Outcome> {
    let a = load(&args.arch, args.batch, args.radius, args.input_norm, args.eps)?;
    let rep = smoothness_report(&a)?;
    writeln!(out, "# {}", args.arch.display()).map_err(io_err)?;
    out.write_all(rep.render().as_bytes()).map_err(io_err)?;
    if let Some(other) = &args.compare {
        let b = load(other, args.batch, args.radius, args.input_norm, args.eps)?;
        let rb = smoothness_report(&b)?;
        writeln!(out, "# {}", other.display()).map_err(io_err)?;
        out.write_all(rb.render().as_bytes()).map_err(io_err)?;
        let c = compare(&rep.output, &rb.output);
        writeln!(out, "ln ratio (first/second): m {:.11e} l {:.11e} L {:.11e}", c.dm, c.dl, c.dbig_l).map_err(io_err)?;
        writeln!(out, "relative l difference: {:.11e}", (-c.dl).exp_m1().abs()).map_err(io_err)?;
    }
    Ok(Outcome::Pass)
}

fn gradcheck_cmd(args: &GradcheckArgs, out: &mut dyn Write) -> Result<Outcome> {
    let a = load(&args.arch, Some(args.batch), None, None, None)?;
    let h = a.objective.synthetic(a.spec.batch, a.spec.output_dim(), args.seed)?;
    let rows = gradcheck(&a.spec, h.as_ref(), args.seed)?;
    let mut ok = true;
    writeln!(out, "{:<10} {:>22} {:>22} {:>12} result", "direction", "backward", "central diff", "rel err").map_err(io_err)?;
    for r in &rows {
        let pass = r.rel_error <= args.tol;
        ok &= pass;
        let label = r.layer.map_or("all".to_string(), |t| format!("layer {t}"));
        writeln!(
            out,
            "{label:<10} {:>22.14e} {:>22.14e} {:>12.3e} {}",
            r.analytic,
            r.numeric,
            r.rel_error,
            if pass { "pass" } else { "FAIL" }
        )
        .map_err(io_err)?;
    }
    Ok(if ok { Outcome::Pass } else { Outcome::Fail })
}

fn bench_cmd(args: &BenchArgs, out: &mut dyn Write) -> Result<Outcome> {
    let rows = oracle_bench(&args.taus, args.width, args.batch, args.kappa, args.seed)?;
    match &args.out {
        Some(p) => write_bench_csv(&rows, File::create(p).map_err(io_err)?)?,
        None => write_bench_csv(&rows, &mut *out)?,
    }
    let ok = rows.iter().all(|r| r.dp_error <= 1e-8 && r.dual_error <= 1e-6);
    Ok(if ok { Outcome::Pass } else { Outcome::Fail })
}

fn train_cmd(args: &TrainArgs, out: &mut dyn Write) -> Result<Outcome> {
    let a = load(&args.arch, None, None, None, None)?;
    let spec = &a.spec;
    let h = a.objective.synthetic(spec.batch, spec.output_dim(), args.seed)?;
    let x0 = a.synthetic_input(args.seed);
    let policy = match args.gamma {
        Some(g) => StepPolicy::Fixed(g),
        None => StepPolicy::Certified,
    };
    let cfg = TrainConfig {
        domain: a.domain.clone(),
        policy,
        steps: args.steps,
        batch: args.batch,
        seed: args.seed,
        tol: args.tol,
    };
    let u0 = ParamVector::zeros(spec);
    let trace = if args.batch == 0 {
        train_pgd(spec, h.as_ref(), a.regularizer, &x0, &u0, &cfg)?
    } else {
        train_sgd(spec, h.as_ref(), a.regularizer, &x0, &u0, &cfg)?
    };
    if let Some(p) = &args.out {
        trace.write_csv(File::create(p).map_err(io_err)?)?;
    }
    let first = trace.rows.first().expect("at least one step");
    let last = trace.rows.last().expect("at least one step");
    writeln!(out, "gamma {:.12e}", trace.gamma).map_err(io_err)?;
    if let Some(l) = trace.smoothness {
        writeln!(out, "certified L_F {l:.12e}").map_err(io_err)?;
    }
    if let Some(v) = trace.variance {
        writeln!(out, "gradient variance proxy {v:.12e}").map_err(io_err)?;
    }
    writeln!(out, "iterations {}", trace.rows.len()).map_err(io_err)?;
    writeln!(out, "objective {:.12e} -> {:.12e}", first.value, last.value).map_err(io_err)?;
    writeln!(out, "min gradient mapping norm {:.12e}", trace.min_mapping_norm()).map_err(io_err)?;
    Ok(Outcome::Pass)
}

/// Runs the CLI on `args` (including the program name) and returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = if code == 0 { write!(out, "{e}") } else { write!(err, "{e}") };
            return code;
        }
    };
    let res = match &cli.command {
        Command::Smoothness(a) => smoothness(a, out),
        Command::Gradcheck(a) => gradcheck_cmd(a, out),
        Command::OracleBench(a) => bench_cmd(a, out),
        Command::Train(a) => train_cmd(a, out),
    };
    match res {
        Ok(Outcome::Pass) => 0,
        Ok(Outcome::Fail) => 1,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            match e {
                Error::Parse { .. }
                | Error::Invalid(_)
                | Error::Dimension(_)
                | Error::Unbounded(_)
                | Error::UnknownLayer(_)
                | Error::CapExceeded(_) => 2,
                _ => 1,
            }
        }
    }
}

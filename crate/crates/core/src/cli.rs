//! Command-line front end: run one solver, or compare PADPD against direct
//! multi-block ADMM on the same instance.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, ValueEnum};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::baseline::{admm_direct_multiblock, AdmmConfig, AdmmError};
use crate::distributed::{
    default_consensus_eta, solve_consensus, ConsensusConfig, DistributedError, ETA_INTERVAL,
};
use crate::operator::BlockProblem;
use crate::problems::{resolve, Problem, ProblemError};
use crate::solver::{solve, EtaPolicy, SolverConfig, SolverError, StopReason};
use crate::trace::{write_csv, IterationRecord};

pub const TRACE_DIR_ENV: &str = "PADPD_TRACE_DIR";
pub const DEFAULT_TRACE_DIR: &str = "traces";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Algorithm {
    Padpd,
    #[value(name = "padpd-rho0")]
    PadpdRho0,
    #[value(name = "admm-direct")]
    AdmmDirect,
    Consensus,
}

impl Algorithm {
    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::Padpd => "padpd",
            Algorithm::PadpdRho0 => "padpd-rho0",
            Algorithm::AdmmDirect => "admm-direct",
            Algorithm::Consensus => "consensus",
        }
    }
}

#[derive(Debug, Clone, Parser)]
#[command(
    name = "padpd",
    version,
    about = "Fully parallel primal-dual splitting solver"
)]
pub struct RunSpec {
    /// Built-in problem name or path to a problem file.
    #[arg(long, default_value = "example1")]
    pub problem: String,
    #[arg(long, value_enum, default_value = "padpd")]
    pub algorithm: Algorithm,
    /// Augmented Lagrangian penalty (default 1; forced to 0 by padpd-rho0).
    #[arg(long)]
    pub rho: Option<f64>,
    /// Step size (default: 0.9/(2L), or 0.9/4 for consensus).
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long, default_value_t = 50_000)]
    pub max_iter: usize,
    /// KKT residual at which a run counts as converged.
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
    /// Trace CSV path (default: <trace dir>/<problem>-<algorithm>.csv).
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Seed for the random initial point and the random-qp generator.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Start from the origin instead of a seeded random point.
    #[arg(long)]
    pub zero_init: bool,
    /// Record every iteration instead of decimating long runs.
    #[arg(long)]
    pub full_trace: bool,
    /// Run padpd and admm-direct side by side with --max-iter as the shared budget.
    #[arg(long)]
    pub compare: bool,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Distributed(#[from] DistributedError),
    #[error(transparent)]
    Admm(#[from] AdmmError),
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("{0}")]
    Usage(String),
}

/// Process exit status for a finished run.
pub fn exit_code(stop: StopReason) -> i32 {
    match stop {
        StopReason::Converged => 0,
        StopReason::MaxIter => 2,
        StopReason::Diverged => 3,
    }
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub stop: StopReason,
    pub iterations: usize,
    pub final_error: f64,
    pub kkt_residual: f64,
    pub eta: Option<f64>,
    pub lipschitz: Option<f64>,
    pub rho: Option<f64>,
    pub primal: DVector<f64>,
    pub records: Vec<IterationRecord>,
    pub trace_path: Option<PathBuf>,
}

impl RunReport {
    pub fn exit_code(&self) -> i32 {
        exit_code(self.stop)
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn trace_dir() -> PathBuf {
    std::env::var_os(TRACE_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_TRACE_DIR))
}

fn problem_stem(problem: &str) -> String {
    Path::new(problem)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "problem".into())
}

fn trace_path(spec: &RunSpec, label: &str) -> PathBuf {
    spec.trace
        .clone()
        .unwrap_or_else(|| trace_dir().join(format!("{}-{label}.csv", problem_stem(&spec.problem))))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

fn write_trace(path: &Path, records: &[IterationRecord]) -> Result<(), CliError> {
    let mut out = create(path)?;
    write_csv(records, &mut out)
        .and_then(|_| out.flush())
        .map_err(io_err(path))
}

/// Seeded point in `[-1, 1]^n` on a grid of `2^-20`.
pub fn random_point(n: usize, seed: u64) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    const SCALE: i32 = 1 << 20;
    DVector::from_fn(n, |_, _| {
        f64::from(rng.random_range(-SCALE..=SCALE)) / f64::from(SCALE)
    })
}

fn initial_point(spec: &RunSpec, n: usize) -> DVector<f64> {
    if spec.zero_init {
        DVector::zeros(n)
    } else {
        random_point(n, spec.seed)
    }
}

fn check_common(spec: &RunSpec) -> Result<(), CliError> {
    if spec.max_iter == 0 {
        return Err(CliError::Usage("--max-iter must be positive".into()));
    }
    if !(spec.tol >= 0.0) {
        return Err(CliError::Usage("--tol must be nonnegative".into()));
    }
    Ok(())
}

fn block_problem(problem: Problem) -> BlockProblem {
    match problem {
        Problem::Block(p) => p,
        Problem::Consensus(c) => c.lifted(),
    }
}

fn effective_rho(spec: &RunSpec) -> Result<f64, CliError> {
    match (spec.algorithm, spec.rho) {
        (Algorithm::PadpdRho0, Some(r)) if r != 0.0 => Err(CliError::Usage(format!(
            "padpd-rho0 runs with rho = 0, got --rho {r}"
        ))),
        (Algorithm::PadpdRho0, _) => Ok(0.0),
        (_, r) => Ok(r.unwrap_or(1.0)),
    }
}

fn run_padpd(spec: &RunSpec, problem: &BlockProblem, rho: f64) -> Result<RunReport, CliError> {
    let mut config = SolverConfig {
        rho,
        max_iter: spec.max_iter,
        tol: spec.tol,
        full_trace: spec.full_trace,
        ..SolverConfig::default()
    };
    if let Some(eta) = spec.eta {
        config.eta = EtaPolicy::Explicit(eta);
    }
    let p0 = initial_point(spec, problem.stacked_dim());
    let out = solve(problem, &config, Some((p0.clone(), p0)))?;
    Ok(RunReport {
        stop: out.stop,
        iterations: out.state.k,
        final_error: out.final_error(),
        kkt_residual: out.kkt_residual,
        eta: Some(out.eta),
        lipschitz: Some(out.lipschitz),
        rho: Some(out.rho),
        primal: out.primal(),
        records: out.records,
        trace_path: None,
    })
}

fn run_admm(spec: &RunSpec, problem: &BlockProblem, rho: f64) -> Result<RunReport, CliError> {
    let config = AdmmConfig {
        rho,
        max_iter: spec.max_iter,
        tol: spec.tol,
        full_trace: spec.full_trace,
        ..AdmmConfig::default()
    };
    let init = initial_point(spec, problem.stacked_dim());
    let out = admm_direct_multiblock(problem, &config, Some(init))?;
    Ok(RunReport {
        stop: out.stop,
        iterations: out.iterations,
        final_error: out.records.last().map(|r| r.error).unwrap_or(f64::NAN),
        kkt_residual: out.kkt_residual,
        eta: None,
        lipschitz: None,
        rho: Some(rho),
        primal: out.primal(),
        records: out.records,
        trace_path: None,
    })
}

fn run_consensus(spec: &RunSpec, problem: Problem) -> Result<RunReport, CliError> {
    let Problem::Consensus(problem) = problem else {
        return Err(CliError::Usage(
            "--algorithm consensus needs a consensus problem".into(),
        ));
    };
    if spec.rho.is_some_and(|r| r != 0.0) {
        return Err(CliError::Usage(
            "the consensus algorithm runs with rho = 0".into(),
        ));
    }
    let config = ConsensusConfig {
        eta: spec.eta.unwrap_or_else(default_consensus_eta),
        max_iter: spec.max_iter,
        tol: spec.tol,
        full_trace: spec.full_trace,
        keep_history: false,
    };
    let p0 = initial_point(spec, 2 * problem.agents() * problem.local_dim());
    let out = solve_consensus(&problem, &config, Some((p0.clone(), p0)))?;
    let primal = DVector::from_iterator(
        problem.agents() * problem.local_dim(),
        out.x.iter().flat_map(|v| v.iter().copied()),
    );
    Ok(RunReport {
        stop: out.stop,
        iterations: out.rounds,
        final_error: out.records.last().map(|r| r.error).unwrap_or(f64::NAN),
        kkt_residual: out.kkt_residual,
        eta: Some(out.eta),
        lipschitz: Some(2.0),
        rho: Some(0.0),
        primal,
        records: out.records,
        trace_path: None,
    })
}

fn execute(spec: &RunSpec, algorithm: Algorithm) -> Result<RunReport, CliError> {
    check_common(spec)?;
    let problem = resolve(&spec.problem, spec.seed)?;
    let rho = effective_rho(spec)?;
    match algorithm {
        Algorithm::Padpd | Algorithm::PadpdRho0 => run_padpd(spec, &block_problem(problem), rho),
        Algorithm::AdmmDirect => run_admm(spec, &block_problem(problem), rho),
        Algorithm::Consensus => run_consensus(spec, problem),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_else(|| "n/a".into())
}

/// Runs one solver, writes its trace and prints a `key=value` summary.
pub fn cmd_run<W: Write>(spec: &RunSpec, out: &mut W) -> Result<RunReport, CliError> {
    let start = Instant::now();
    let mut report = execute(spec, spec.algorithm)?;
    let wall = start.elapsed().as_secs_f64();
    let path = trace_path(spec, spec.algorithm.name());
    write_trace(&path, &report.records)?;

    let stdout_err = |e| CliError::Io {
        path: "<stdout>".into(),
        source: e,
    };
    let interval = report.lipschitz.map(|l| {
        if spec.algorithm == Algorithm::Consensus {
            format!("({}, {})", ETA_INTERVAL.0, ETA_INTERVAL.1)
        } else {
            format!("(0, {:e})", 1.0 / (2.0 * l))
        }
    });
    let lines = [
        ("problem", spec.problem.clone()),
        ("algorithm", spec.algorithm.name().to_string()),
        ("stop", report.stop.as_str().to_string()),
        ("iterations", report.iterations.to_string()),
        ("final_error", format!("{:e}", report.final_error)),
        ("final_residual", format!("{:e}", report.kkt_residual)),
        ("eta", fmt_opt(report.eta)),
        ("lipschitz", fmt_opt(report.lipschitz)),
        ("eta_interval", interval.unwrap_or_else(|| "n/a".into())),
        ("rho", fmt_opt(report.rho)),
        ("wall_time_s", format!("{wall:.6}")),
        (
            "diverged",
            (report.stop == StopReason::Diverged).to_string(),
        ),
        ("trace", path.display().to_string()),
    ];
    for (k, v) in lines {
        writeln!(out, "{k}={v}").map_err(stdout_err)?;
    }
    report.trace_path = Some(path);
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct CompareReport {
    pub padpd: RunReport,
    /// `Err` holds the reason ADMM was not run.
    pub admm: Result<RunReport, String>,
    pub verdict: String,
    pub trace_path: PathBuf,
}

impl CompareReport {
    pub fn exit_code(&self) -> i32 {
        self.padpd.exit_code()
    }
}

fn describe(stop: StopReason) -> &'static str {
    match stop {
        StopReason::Converged => "converged",
        StopReason::MaxIter => "did not converge within budget",
        StopReason::Diverged => "diverged",
    }
}

/// Runs PADPD and direct multi-block ADMM on the same problem, initial point
/// and budget, writes `k,padpd_error,admm_direct_error` and prints a verdict.
pub fn cmd_compare<W: Write>(spec: &RunSpec, out: &mut W) -> Result<CompareReport, CliError> {
    if matches!(spec.algorithm, Algorithm::AdmmDirect | Algorithm::Consensus) {
        return Err(CliError::Usage(
            "--compare runs padpd (or padpd-rho0) against admm-direct".into(),
        ));
    }
    let padpd = execute(spec, spec.algorithm)?;
    let rho = padpd.rho.unwrap_or(1.0);
    let admm = match execute(spec, Algorithm::AdmmDirect) {
        Ok(r) => Ok(r),
        Err(CliError::Admm(AdmmError::Penalty(r))) => {
            Err(format!("rejected (rho must be > 0, got {r})"))
        }
        Err(e) => return Err(e),
    };

    let mut rows: BTreeMap<usize, (Option<f64>, Option<f64>)> = BTreeMap::new();
    for r in &padpd.records {
        rows.entry(r.k).or_default().0 = Some(r.error);
    }
    if let Ok(a) = &admm {
        for r in &a.records {
            rows.entry(r.k).or_default().1 = Some(r.error);
        }
    }
    let path = trace_path(spec, "compare");
    let mut file = create(&path)?;
    let cell = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
    let written: io::Result<()> = (|| {
        writeln!(file, "k,padpd_error,admm_direct_error")?;
        for (k, (p, a)) in &rows {
            writeln!(file, "{k},{},{}", cell(*p), cell(*a))?;
        }
        file.flush()
    })();
    written.map_err(io_err(&path))?;

    let admm_text = match &admm {
        Ok(a) => describe(a.stop).to_string(),
        Err(reason) => reason.clone(),
    };
    let verdict = format!("padpd: {}; admm-direct: {admm_text}", describe(padpd.stop));
    let stdout_err = |e| CliError::Io {
        path: "<stdout>".into(),
        source: e,
    };
    let mut lines = vec![
        ("problem", spec.problem.clone()),
        ("rho", format!("{rho:e}")),
        ("budget", spec.max_iter.to_string()),
        ("padpd_iterations", padpd.iterations.to_string()),
        ("padpd_final_error", format!("{:e}", padpd.final_error)),
    ];
    if let Ok(a) = &admm {
        lines.push(("admm_iterations", a.iterations.to_string()));
        lines.push(("admm_final_error", format!("{:e}", a.final_error)));
        if padpd.stop == StopReason::Converged && a.stop == StopReason::Converged {
            lines.push((
                "primal_gap",
                format!("{:e}", (&padpd.primal - &a.primal).amax()),
            ));
        }
    }
    lines.push(("trace", path.display().to_string()));
    lines.push(("verdict", verdict.clone()));
    for (k, v) in lines {
        writeln!(out, "{k}={v}").map_err(stdout_err)?;
    }
    Ok(CompareReport {
        padpd,
        admm,
        verdict,
        trace_path: path,
    })
}

/// Parses arguments, dispatches, and returns the process exit status.
pub fn main_with_args<I, T, W>(args: I, out: &mut W) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
    W: Write,
{
    let spec = match RunSpec::try_parse_from(args) {
        Ok(s) => s,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = if spec.compare {
        cmd_compare(&spec, out).map(|r| r.exit_code())
    } else {
        cmd_run(&spec, out).map(|r| r.exit_code())
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        1
    })
}

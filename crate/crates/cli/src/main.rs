//! `robust-debias` command-line tool.
//!
//! Exit codes: 0 on success, 1 for usage and input errors, 2 for numerical
//! failures. Numerical failures print a JSON diagnostic on stderr and also
//! leave it in `<out-dir>/error.json`.

mod io;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use robust_debias::dof::{self, DofError, TraceReport};
use robust_debias::inference::{self, InferenceError, PrecisionInfo};
use robust_debias::sim::{self, SimConfig};
use robust_debias::solver::{self, FitResult, SolverError, SolverOptions};
use robust_debias::stein::{self, Identity, PsiPlugin, SphereField};
use robust_debias::{Penalty, RobustLoss};

#[derive(Parser)]
#[command(name = "robust-debias", version)]
#[command(about = "Penalized robust regression with debiased confidence intervals")]
struct Cli {
    /// Seed for every random draw
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads, a count or "auto"
    #[arg(long, global = true, env = "ROBUST_DEBIAS_THREADS")]
    threads: Option<String>,

    /// Increase log verbosity (-v info, -vv debug)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    /// Directory for outputs without an explicit path
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the penalized M-estimator
    Fit(FitArgs),
    /// Trace of the Jacobian of y -> psi(y - X beta_hat)
    Dof(DofArgs),
    /// Debiased estimates and confidence intervals
    Infer(InferArgs),
    /// Monte-Carlo check of the Stein formulas on the sphere
    SteinVerify(SteinArgs),
    /// Run the simulation study
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct FitArgs {
    /// CSV with header y,x1,...,xp
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "huber")]
    loss: String,
    /// Loss scale
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    /// elastic_net or ridge
    #[arg(long, default_value = "elastic_net")]
    penalty: String,
    #[arg(long, default_value_t = 0.0)]
    lambda: f64,
    #[arg(long)]
    tau: f64,
    /// Accept tau = 0 (no uniqueness or inference guarantees)
    #[arg(long)]
    allow_tau_zero: bool,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    kkt_tol: Option<f64>,
    /// Output file (default <out-dir>/fit.json)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum DofMethod {
    Closed,
    Fd,
    Hutch,
}

#[derive(Args)]
struct DofArgs {
    #[arg(long)]
    fit: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "closed")]
    method: DofMethod,
    /// Finite-difference step
    #[arg(long)]
    h: Option<f64>,
    #[arg(long, default_value_t = 100)]
    probes: usize,
    /// Pseudo-inverse fallback for a singular active Gram matrix when tau = 0
    #[arg(long)]
    pinv: bool,
    /// Output file (default <out-dir>/dof.json)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    fit: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Design covariance as a p x p CSV
    #[arg(long, conflicts_with = "assume_identity", required_unless_present = "assume_identity")]
    sigma_file: Option<PathBuf>,
    /// Take the design covariance to be the identity
    #[arg(long)]
    assume_identity: bool,
    /// One-based coordinates, e.g. 1,2,5 (default: all)
    #[arg(long, value_delimiter = ',')]
    coords: Vec<usize>,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// How to compute the trace (closed form needs the Huber loss)
    #[arg(long, value_enum)]
    method: Option<DofMethod>,
    /// Output file (default <out-dir>/ci.csv)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum IdentityArg {
    First,
    Poincare,
    Second,
    Bounds,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum FieldArg {
    Identity,
    Linear,
    PsiPlugin,
}

#[derive(Args)]
struct SteinArgs {
    #[arg(long, value_enum)]
    identity: IdentityArg,
    #[arg(long, default_value_t = 50)]
    n: usize,
    #[arg(long, default_value_t = 1.0)]
    radius: f64,
    #[arg(long, value_enum, default_value = "identity")]
    field: FieldArg,
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    /// Number of covariates of the psi-plugin field
    #[arg(long, default_value_t = 10)]
    p: usize,
    /// Output file (default <out-dir>/stein_report.json)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// JSON configuration; omitted fields take their defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the number of replications
    #[arg(long)]
    reps: Option<usize>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Numerical { kind: String, detail: serde_json::Value },
}

impl CliError {
    fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Usage(format!("{}: {e}", path.display()))
    }

    fn numerical(kind: &str, detail: serde_json::Value) -> Self {
        CliError::Numerical {
            kind: kind.to_string(),
            detail,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Numerical { kind, detail } => write!(f, "{kind}: {detail}"),
        }
    }
}

impl From<SolverError> for CliError {
    fn from(e: SolverError) -> Self {
        match e {
            SolverError::MaxIterExceeded { best } => CliError::numerical(
                "no_convergence",
                json!({
                    "message": "solver hit max_iter before reaching kkt_tol",
                    "iterations": best.iterations,
                    "kkt_residual": best.kkt_residual,
                    "objective": best.objective,
                }),
            ),
            SolverError::NonFiniteInput(_) | SolverError::DimensionMismatch(_) | SolverError::InvalidOptions(_) => {
                CliError::Usage(e.to_string())
            }
        }
    }
}

impl From<DofError> for CliError {
    fn from(e: DofError) -> Self {
        match e {
            DofError::Solver(s) => s.into(),
            DofError::InvalidArgument(_) | DofError::NotHuber | DofError::UnsupportedPenalty(_) => {
                CliError::Usage(e.to_string())
            }
            other => CliError::numerical("dof", json!({ "message": other.to_string() })),
        }
    }
}

impl From<InferenceError> for CliError {
    fn from(e: InferenceError) -> Self {
        match e {
            InferenceError::InvalidLevel(_) | InferenceError::IndexOutOfRange { .. } | InferenceError::DimensionMismatch(_) => {
                CliError::Usage(e.to_string())
            }
            other => CliError::numerical("inference", json!({ "message": other.to_string() })),
        }
    }
}

/// The model that produced a fit, stored next to it.
#[derive(Serialize, Deserialize)]
struct ModelSpec {
    loss: RobustLoss,
    penalty: Penalty,
    solver: SolverOptions,
    allow_tau_zero: bool,
}

#[derive(Serialize, Deserialize)]
struct FitFile {
    model: ModelSpec,
    #[serde(flatten)]
    fit: FitResult,
}

fn usage<E: fmt::Display>(e: E) -> CliError {
    CliError::Usage(e.to_string())
}

fn out_path(out_dir: &Path, explicit: &Option<PathBuf>, default: &str) -> PathBuf {
    explicit.clone().unwrap_or_else(|| out_dir.join(default))
}

fn load_fit(path: &Path) -> Result<FitFile, CliError> {
    let f: FitFile = io::read_json(path)?;
    f.model.loss.validate().map_err(usage)?;
    f.model.penalty.validate(f.model.allow_tau_zero).map_err(usage)?;
    Ok(f)
}

fn check_shapes(data: &io::Data, fit: &FitResult) -> Result<(), CliError> {
    if data.x.shape() != (fit.n(), fit.p()) {
        return Err(CliError::Usage(format!(
            "data is {}x{} but the fit is {}x{}",
            data.x.nrows(),
            data.x.ncols(),
            fit.n(),
            fit.p()
        )));
    }
    Ok(())
}

fn run_fit(cli: &Cli, a: &FitArgs) -> Result<(), CliError> {
    let data = io::read_data(&a.data)?;
    let loss = RobustLoss::from_name(&a.loss, a.sigma).map_err(usage)?;
    let penalty = match a.penalty.as_str() {
        "elastic_net" | "enet" if a.allow_tau_zero => Penalty::elastic_net_allow_tau_zero(a.lambda, a.tau),
        name => Penalty::from_name(name, a.lambda, a.tau),
    }
    .map_err(usage)?;
    let mut opts = SolverOptions::default();
    if let Some(m) = a.max_iter {
        opts.max_iter = m;
    }
    if let Some(t) = a.kkt_tol {
        opts.kkt_tol = t;
    }
    let fit = solver::fit(&data.x, &data.y, &loss, &penalty, &opts)?;
    let path = out_path(&cli.out_dir, &a.out, "fit.json");
    println!(
        "converged in {} iterations, KKT residual {:.3e}, |S| = {}{}",
        fit.iterations,
        fit.kkt_residual,
        fit.active_set.len(),
        fit.n_hat.map_or(String::new(), |k| format!(", n_hat = {k}"))
    );
    let file = FitFile {
        model: ModelSpec {
            loss,
            penalty,
            solver: opts,
            allow_tau_zero: a.allow_tau_zero,
        },
        fit,
    };
    io::write_json(&path, &file)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn compute_trace(
    method: DofMethod,
    file: &FitFile,
    data: &io::Data,
    h: Option<f64>,
    probes: usize,
    seed: u64,
    pinv: bool,
) -> Result<TraceReport, CliError> {
    let m = &file.model;
    Ok(match method {
        DofMethod::Closed if pinv => dof::huber_enet_trace_pinv(&file.fit, &data.x, &m.penalty)?,
        DofMethod::Closed => dof::huber_enet_trace(&file.fit, &data.x, &m.penalty)?,
        DofMethod::Fd => {
            dof::finite_difference_trace_from(&file.fit, &data.x, &data.y, &m.loss, &m.penalty, h, &m.solver)?
        }
        DofMethod::Hutch => {
            dof::hutchinson_trace(&data.x, &data.y, &m.loss, &m.penalty, probes, seed, h, &m.solver)?
        }
    })
}

fn run_dof(cli: &Cli, a: &DofArgs) -> Result<(), CliError> {
    let file = load_fit(&a.fit)?;
    let data = io::read_data(&a.data)?;
    check_shapes(&data, &file.fit)?;
    let rep = compute_trace(a.method, &file, &data, a.h, a.probes, cli.seed.unwrap_or(0), a.pinv)?;
    println!("trace = {:.6}", rep.trace_value);
    if let (Some(k), Some(df)) = (rep.n_hat, rep.df) {
        println!("n_hat = {k}, df = {df:.6}");
    }
    if let Some(se) = rep.diagnostics.std_error {
        println!("standard error = {se:.3e}");
    }
    let path = out_path(&cli.out_dir, &a.out, "dof.json");
    io::write_json(&path, &rep)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn fmt_num(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else if v > 0.0 {
        "inf".into()
    } else if v < 0.0 {
        "-inf".into()
    } else {
        "nan".into()
    }
}

fn run_infer(cli: &Cli, a: &InferArgs) -> Result<(), CliError> {
    let file = load_fit(&a.fit)?;
    let data = io::read_data(&a.data)?;
    check_shapes(&data, &file.fit)?;
    let p = data.x.ncols();
    let prec = match &a.sigma_file {
        Some(path) => {
            let s = io::read_matrix(path)?;
            if s.nrows() != p {
                return Err(CliError::Usage(format!(
                    "{}: covariance is {}x{} but p = {p}",
                    path.display(),
                    s.nrows(),
                    s.ncols()
                )));
            }
            PrecisionInfo::new(s)?
        }
        None => PrecisionInfo::identity(p),
    };
    let coords: Vec<usize> = if a.coords.is_empty() {
        (0..p).collect()
    } else {
        a.coords
            .iter()
            .map(|&j| {
                if j >= 1 && j <= p {
                    Ok(j - 1)
                } else {
                    Err(CliError::Usage(format!("coordinate {j} outside 1..={p}")))
                }
            })
            .collect::<Result<_, _>>()?
    };
    let method = a.method.unwrap_or(match file.model.loss {
        RobustLoss::Huber { .. } => DofMethod::Closed,
        _ => DofMethod::Fd,
    });
    let trace = compute_trace(method, &file, &data, None, 100, cli.seed.unwrap_or(0), false)?;
    let mut res = inference::infer(&file.fit, &prec, &data.x, trace.trace_value, &coords, a.level)?;
    if file.model.penalty.tau() == 0.0 {
        for c in &mut res.coords {
            c.flags.push("outside_theorem_assumptions".to_string());
        }
    }

    let path = out_path(&cli.out_dir, &a.out, "ci.csv");
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(&path).map_err(usage)?;
    w.write_record(["j", "beta_hat", "debiased", "lo", "hi", "omega_jj", "v_hat", "flags"])
        .map_err(usage)?;
    let v_hat = res.v_hat.map_or("inf".to_string(), fmt_num);
    for c in &res.coords {
        w.write_record([
            (c.j + 1).to_string(),
            fmt_num(c.beta_hat),
            fmt_num(c.debiased),
            fmt_num(c.lo),
            fmt_num(c.hi),
            fmt_num(c.omega_jj),
            v_hat.clone(),
            c.flags.join(";"),
        ])
        .map_err(usage)?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;
    println!(
        "trace = {:.6}, V_hat = {v_hat}, {} coordinates at level {}",
        res.trace_value,
        res.coords.len(),
        res.level
    );
    println!("wrote {}", path.display());
    Ok(())
}

fn run_stein(cli: &Cli, a: &SteinArgs) -> Result<(), CliError> {
    let seed = cli.seed.unwrap_or(0);
    let field = match a.field {
        FieldArg::Identity => SphereField::identity(a.n, a.radius),
        FieldArg::Linear => SphereField::random_linear(a.n, a.radius, seed.wrapping_add(1)),
        FieldArg::PsiPlugin => {
            PsiPlugin::random(a.n, a.p, seed.wrapping_add(1)).and_then(|f| f.into_field(a.radius))
        }
    }
    .map_err(usage)?;
    let ids = match a.identity {
        IdentityArg::First => vec![Identity::FirstOrder],
        IdentityArg::Poincare => vec![Identity::Poincare],
        IdentityArg::Second => vec![Identity::SecondOrder],
        IdentityArg::Bounds => vec![Identity::PropBounds],
        IdentityArg::All => vec![
            Identity::FirstOrder,
            Identity::Poincare,
            Identity::SecondOrder,
            Identity::PropBounds,
        ],
    };
    let reports = stein::check_identities(&field, &ids, a.samples, seed).map_err(|e| match e {
        stein::SteinError::NonFiniteEvaluation | stein::SteinError::NotRadial(_) => {
            CliError::numerical("stein", json!({ "message": e.to_string() }))
        }
        other => usage(other),
    })?;
    let mut failed = Vec::new();
    for r in &reports {
        for c in &r.checks {
            println!(
                "{:<5} {}: lhs {:.6e} (se {:.2e}) rhs {:.6e} (se {:.2e})",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.lhs_estimate,
                c.mc_se_lhs,
                c.rhs_estimate,
                c.mc_se_rhs
            );
            if !c.passed {
                failed.push(c.name.clone());
            }
        }
    }
    let path = out_path(&cli.out_dir, &a.out, "stein_report.json");
    if reports.len() == 1 {
        io::write_json(&path, &reports[0])?;
    } else {
        io::write_json(&path, &reports)?;
    }
    println!("wrote {}", path.display());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::numerical(
            "stein_check_failed",
            json!({ "failed": failed, "report": path }),
        ))
    }
}

fn run_simulate(cli: &Cli, a: &SimulateArgs) -> Result<(), CliError> {
    let mut cfg: SimConfig = match &a.config {
        Some(p) => io::read_json(p)?,
        None => SimConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(r) = a.reps {
        cfg.reps = r;
    }
    cfg.validate().map_err(usage)?;
    let report = sim::run_experiment(&cfg).map_err(|e| match e {
        sim::SimError::SigmaNotSpd => CliError::numerical("simulate", json!({ "message": e.to_string() })),
        other => usage(other),
    })?;
    println!(
        "{:<24} {:>16} {:>14} {:>14} {:>14} {:>8} {:>8}",
        "cell", "n_hat", "df", "|S|", "sqrt(V/n)", "cover", "KS"
    );
    for c in &report.cells {
        println!(
            "{:<24} {:>7.1} +- {:<5.1} {:>6.1} +- {:<4.1} {:>6.1} +- {:<4.1} {:>6.3} +- {:<4.3} {:>8.3} {:>8}",
            c.tag(),
            c.n_hat.mean,
            c.n_hat.sd,
            c.df.mean,
            c.df.sd,
            c.support.mean,
            c.support.sd,
            c.sqrt_v_over_n.mean,
            c.sqrt_v_over_n.sd,
            c.coverage,
            c.ks.map_or("n/a".to_string(), |k| format!("{:.4}", k.statistic))
        );
        if c.outside_theorem_assumptions {
            println!("  tau = 0: outside theorem assumptions, reported as an empirical extension");
        }
        if c.failures.total() > 0 {
            println!("  {} failed replications: {:?}", c.failures.total(), c.failures);
        }
    }
    let written = sim::emit_report(&report, &cli.out_dir).map_err(|e| match e {
        sim::SimError::EmptyScores(_) => CliError::numerical("simulate", json!({ "message": e.to_string() })),
        other => usage(other),
    })?;
    println!("wrote {} files to {}", written.len(), cli.out_dir.display());
    Ok(())
}

fn setup_threads(spec: &Option<String>) -> Result<(), CliError> {
    let Some(s) = spec else { return Ok(()) };
    if s == "auto" {
        return Ok(());
    }
    let k: usize = s
        .parse()
        .ok()
        .filter(|&k| k > 0)
        .ok_or_else(|| CliError::Usage(format!("--threads must be a positive count or \"auto\", got {s:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(k)
        .build_global()
        .map_err(usage)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    setup_threads(&cli.threads)?;
    match &cli.command {
        Command::Fit(a) => run_fit(cli, a),
        Command::Dof(a) => run_dof(cli, a),
        Command::Infer(a) => run_infer(cli, a),
        Command::SteinVerify(a) => run_stein(cli, a),
        Command::Simulate(a) => run_simulate(cli, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(CliError::Numerical { kind, detail }) => {
            let diag = json!({ "error": kind, "detail": detail });
            eprintln!("{}", serde_json::to_string(&diag).unwrap_or_default());
            let path = cli.out_dir.join("error.json");
            if io::write_json(&path, &diag).is_err() {
                eprintln!("warning: could not write {}", path.display());
            }
            ExitCode::from(2)
        }
    }
}

//! Monte-Carlo harness for Huber + Elastic-Net inference on correlated
//! Gaussian designs.
//!
//! The design covariance is `Sigma = A'A / n` (or `A'A / (2p)`) with a
//! `2p x p` Rademacher matrix `A` drawn once from the master seed. Each
//! replication draws its own rows `x_i ~ N(0, Sigma)`, Bernoulli
//! coefficients and noise from a dedicated ChaCha stream, so results do not
//! depend on thread scheduling. Every (lambda, tau) cell is fitted on the
//! same replications.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dof;
use crate::inference::{self, PrecisionInfo};
use crate::losses::RobustLoss;
use crate::normal;
use crate::penalties::Penalty;
use crate::solver::{self, SolverOptions};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("design covariance is not positive definite")]
    SigmaNotSpd,
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("cell {0} has no z-scores to report")]
    EmptyScores(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Noise {
    Cauchy,
    StudentT2,
    Normal,
}

impl Noise {
    pub fn name(&self) -> &'static str {
        match self {
            Noise::Cauchy => "cauchy",
            Noise::StudentT2 => "student_t2",
            Noise::Normal => "normal",
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            Noise::Normal => rng.sample(StandardNormal),
            Noise::Cauchy => {
                let u = open_uniform(rng);
                (std::f64::consts::PI * (u - 0.5)).tan()
            }
            Noise::StudentT2 => {
                let u = open_uniform(rng);
                (2.0 * u - 1.0) / (2.0 * u * (1.0 - u)).sqrt()
            }
        }
    }
}

// uniform on the open interval (0, 1)
fn open_uniform<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

/// How the Rademacher Gram matrix is scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaNormalization {
    /// `A'A / n`, eigenvalues around `2p / n`.
    Literal,
    /// `A'A / (2p)`, so that `E[Sigma] = I`.
    Balanced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n: usize,
    pub p: usize,
    pub reps: usize,
    pub noise: Noise,
    pub beta_prob: f64,
    pub sigma_normalization: SigmaNormalization,
    /// Penalty levels in units of `n^{-1/2}`.
    pub lambda_grid: Vec<f64>,
    pub tau_grid: Vec<f64>,
    pub seed: u64,
    /// One-based coordinate under study.
    pub target_coord: usize,
    /// Huber scale.
    pub huber_sigma: f64,
    pub level: f64,
    pub solver: SolverOptions,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n: 200,
            p: 300,
            reps: 1000,
            noise: Noise::Cauchy,
            beta_prob: 0.1,
            sigma_normalization: SigmaNormalization::Balanced,
            lambda_grid: vec![1.0, 2.0],
            tau_grid: vec![0.1, 0.0],
            seed: 20_200_601,
            target_coord: 1,
            huber_sigma: 1.0,
            level: 0.95,
            solver: SolverOptions::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidConfig(m.to_string()));
        if self.n < 2 || self.p < 1 {
            return bad("need n >= 2 and p >= 1");
        }
        if self.reps < 2 {
            return bad("reps must be at least 2");
        }
        if !(0.0..=1.0).contains(&self.beta_prob) {
            return bad("beta_prob must lie in [0, 1]");
        }
        if self.lambda_grid.is_empty() || self.tau_grid.is_empty() {
            return bad("lambda_grid and tau_grid must be nonempty");
        }
        if self.lambda_grid.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return bad("lambda values must be positive");
        }
        if self.tau_grid.iter().any(|&t| !(t >= 0.0 && t.is_finite())) {
            return bad("tau values must be nonnegative");
        }
        if self.target_coord < 1 || self.target_coord > self.p {
            return bad("target_coord must lie in 1..=p");
        }
        if !(self.huber_sigma > 0.0 && self.huber_sigma.is_finite()) {
            return bad("huber_sigma must be positive");
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return bad("level must lie in (0, 1)");
        }
        self.solver
            .validate()
            .map_err(|e| SimError::InvalidConfig(e.to_string()))
    }

    /// Cells in table order: lambda outer, tau inner.
    pub fn cells(&self) -> Vec<(f64, f64)> {
        self.lambda_grid
            .iter()
            .flat_map(|&l| self.tau_grid.iter().map(move |&t| (l, t)))
            .collect()
    }

    pub fn lambda(&self, units: f64) -> f64 {
        units / (self.n as f64).sqrt()
    }
}

/// Covariance shared by all replications.
#[derive(Debug, Clone)]
pub struct Design {
    pub sigma: DMatrix<f64>,
    /// Lower Cholesky factor of `sigma`.
    pub factor: DMatrix<f64>,
    pub precision: PrecisionInfo,
}

impl Design {
    pub fn from_sigma(sigma: DMatrix<f64>) -> Result<Self, SimError> {
        let factor = sigma.clone().cholesky().ok_or(SimError::SigmaNotSpd)?.l();
        let precision = PrecisionInfo::new(sigma.clone()).map_err(|_| SimError::SigmaNotSpd)?;
        Ok(Design {
            sigma,
            factor,
            precision,
        })
    }

    pub fn new(cfg: &SimConfig) -> Result<Self, SimError> {
        let (n, p) = (cfg.n, cfg.p);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(0);
        let a = DMatrix::from_fn(2 * p, p, |_, _| if rng.random::<bool>() { 1.0 } else { -1.0 });
        let scale = match cfg.sigma_normalization {
            SigmaNormalization::Literal => n as f64,
            SigmaNormalization::Balanced => (2 * p) as f64,
        };
        Self::from_sigma(a.tr_mul(&a) / scale)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub beta: DVector<f64>,
    pub eps: DVector<f64>,
}

/// Replication `rep` (zero-based) on a prepared design.
pub fn draw_instance(cfg: &SimConfig, design: &Design, rep: usize) -> Instance {
    let (n, p) = (cfg.n, cfg.p);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(rep as u64 + 1);
    let beta = DVector::from_fn(p, |_, _| if rng.random::<f64>() < cfg.beta_prob { 1.0 } else { 0.0 });
    let g = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
    let eps = DVector::from_fn(n, |_, _| cfg.noise.sample(&mut rng));
    let x = g * design.factor.transpose();
    let y = &x * &beta + &eps;
    Instance { x, y, beta, eps }
}

/// `(X, y, beta, Sigma)` for one replication.
pub fn gen_instance(
    cfg: &SimConfig,
    rep: usize,
) -> Result<(DMatrix<f64>, DVector<f64>, DVector<f64>, DMatrix<f64>), SimError> {
    cfg.validate()?;
    let design = Design::new(cfg)?;
    let inst = draw_instance(cfg, &design, rep);
    Ok((inst.x, inst.y, inst.beta, design.sigma))
}

/// Why a replication produced no statistics for a cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Failure {
    Solver,
    DegenerateTrace,
    ZeroPsi,
    Dof,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RepOutcome {
    pub rep: usize,
    pub n_hat: f64,
    pub df: f64,
    pub support: f64,
    pub sqrt_v_over_n: f64,
    /// `Omega_jj^{1/2} xi'_j`
    pub z_score: f64,
    pub covered: bool,
    pub pseudo_inverse: bool,
    /// Gap between the two algebraic forms of the pivot.
    pub identity_gap: f64,
    pub kkt_residual: f64,
}

fn run_rep_cell(
    cfg: &SimConfig,
    design: &Design,
    inst: &Instance,
    lambda_units: f64,
    tau: f64,
    warm: Option<&DVector<f64>>,
    rep: usize,
) -> (Result<RepOutcome, Failure>, Option<DVector<f64>>) {
    let loss = RobustLoss::Huber { sigma: cfg.huber_sigma };
    let penalty = Penalty::ElasticNet {
        lambda: cfg.lambda(lambda_units),
        tau,
    };
    let j = cfg.target_coord - 1;
    let n = cfg.n;
    let fit = match warm {
        Some(w) => solver::fit_from(&inst.x, &inst.y, &loss, &penalty, &cfg.solver, w),
        None => solver::fit(&inst.x, &inst.y, &loss, &penalty, &cfg.solver),
    };
    let fit = match fit {
        Ok(f) => f,
        Err(e) => {
            log::warn!("rep {rep}, lambda {lambda_units}, tau {tau}: {e}");
            return (Err(Failure::Solver), None);
        }
    };
    let beta_hat = Some(fit.beta_hat.clone());
    let trace = match dof::huber_enet_trace_pinv(&fit, &inst.x, &penalty) {
        Ok(t) => t,
        Err(_) => return (Err(Failure::Dof), beta_hat),
    };
    let (n_hat, df) = (trace.n_hat.unwrap_or(0) as f64, trace.df.unwrap_or(0.0));
    let outcome = (|| {
        let v_hat = inference::variance_hat(&fit.psi, trace.trace_value, n)?;
        let prec = &design.precision;
        let pivot = inference::pivot_oracle(&fit, prec, &inst.x, trace.trace_value, j, inst.beta[j])?;
        let alt = inference::pivot_from_df(&fit, prec, &inst.x, n_hat, df, j, inst.beta[j])?;
        let ci = inference::confidence_interval(&fit, prec, &inst.x, trace.trace_value, j, cfg.level)?;
        Ok::<_, inference::InferenceError>(RepOutcome {
            rep,
            n_hat,
            df,
            support: fit.active_set.len() as f64,
            sqrt_v_over_n: (v_hat / n as f64).sqrt(),
            z_score: pivot.z_xi_prime,
            covered: ci.contains(inst.beta[j]),
            pseudo_inverse: trace.diagnostics.pseudo_inverse,
            identity_gap: (pivot.z_xi_prime - alt).abs(),
            kkt_residual: fit.kkt_residual,
        })
    })();
    let outcome = outcome.map_err(|e| match e {
        inference::InferenceError::ZeroPsi => Failure::ZeroPsi,
        _ => Failure::DegenerateTrace,
    });
    (outcome, beta_hat)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    /// Unbiased standard deviation across replications.
    pub sd: f64,
    /// `sd / sqrt(count)`
    pub se: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Summary {
        let m = values.len();
        if m == 0 {
            return Summary {
                mean: f64::NAN,
                sd: f64::NAN,
                se: f64::NAN,
            };
        }
        let mean = values.iter().sum::<f64>() / m as f64;
        let sd = if m > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1) as f64).sqrt()
        } else {
            f64::NAN
        };
        Summary {
            mean,
            sd,
            se: sd / (m as f64).sqrt(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
    pub below: usize,
    pub above: usize,
}

pub const HIST_BINS: usize = 30;
pub const HIST_RANGE: f64 = 4.0;

impl Histogram {
    pub fn new(values: &[f64], lo: f64, hi: f64, bins: usize) -> Histogram {
        let mut counts = vec![0; bins];
        let (mut below, mut above) = (0, 0);
        let width = (hi - lo) / bins as f64;
        for &v in values {
            if v < lo {
                below += 1;
            } else if v >= hi {
                above += 1;
            } else {
                let k = (((v - lo) / width) as usize).min(bins - 1);
                counts[k] += 1;
            }
        }
        Histogram {
            lo,
            hi,
            counts,
            below,
            above,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FailureCounts {
    pub solver: usize,
    pub degenerate_trace: usize,
    pub zero_psi: usize,
    pub dof: usize,
}

impl FailureCounts {
    pub fn total(&self) -> usize {
        self.solver + self.degenerate_trace + self.zero_psi + self.dof
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellReport {
    pub noise: Noise,
    pub lambda_units: f64,
    pub lambda: f64,
    pub tau: f64,
    /// Set for `tau = 0` cells, which the normality theory does not cover.
    pub outside_theorem_assumptions: bool,
    pub reps: usize,
    pub completed: usize,
    pub failures: FailureCounts,
    pub n_hat: Summary,
    pub df: Summary,
    pub support: Summary,
    pub sqrt_v_over_n: Summary,
    pub coverage: f64,
    pub ks: Option<KsResult>,
    pub pseudo_inverse_reps: usize,
    pub max_identity_gap: f64,
    /// `max |df - |S||` over replications; zero when `tau = 0` in theory.
    pub max_df_support_gap: f64,
    pub max_kkt_residual: f64,
    pub histogram: Histogram,
    /// `(normal quantile, sorted z-score)` pairs.
    pub qq: Vec<(f64, f64)>,
    pub z_scores: Vec<f64>,
    pub sqrt_v_values: Vec<f64>,
}

impl CellReport {
    fn from_outcomes(
        cfg: &SimConfig,
        lambda_units: f64,
        tau: f64,
        outcomes: &[Result<RepOutcome, Failure>],
    ) -> CellReport {
        let mut failures = FailureCounts {
            solver: 0,
            degenerate_trace: 0,
            zero_psi: 0,
            dof: 0,
        };
        let ok: Vec<&RepOutcome> = outcomes
            .iter()
            .filter_map(|o| match o {
                Ok(r) => Some(r),
                Err(f) => {
                    match f {
                        Failure::Solver => failures.solver += 1,
                        Failure::DegenerateTrace => failures.degenerate_trace += 1,
                        Failure::ZeroPsi => failures.zero_psi += 1,
                        Failure::Dof => failures.dof += 1,
                    }
                    None
                }
            })
            .collect();
        let col = |f: fn(&RepOutcome) -> f64| ok.iter().map(|r| f(r)).collect::<Vec<f64>>();
        let z_scores = col(|r| r.z_score);
        let sqrt_v_values = col(|r| r.sqrt_v_over_n);
        let max_of = |f: fn(&RepOutcome) -> f64| ok.iter().map(|r| f(r)).fold(0.0, f64::max);
        let covered = ok.iter().filter(|r| r.covered).count();
        CellReport {
            noise: cfg.noise,
            lambda_units,
            lambda: cfg.lambda(lambda_units),
            tau,
            outside_theorem_assumptions: tau == 0.0,
            reps: outcomes.len(),
            completed: ok.len(),
            failures,
            n_hat: Summary::of(&col(|r| r.n_hat)),
            df: Summary::of(&col(|r| r.df)),
            support: Summary::of(&col(|r| r.support)),
            sqrt_v_over_n: Summary::of(&sqrt_v_values),
            coverage: if ok.is_empty() {
                f64::NAN
            } else {
                covered as f64 / ok.len() as f64
            },
            ks: ks_normal(&z_scores).ok(),
            pseudo_inverse_reps: ok.iter().filter(|r| r.pseudo_inverse).count(),
            max_identity_gap: max_of(|r| r.identity_gap),
            max_df_support_gap: max_of(|r| (r.df - r.support).abs()),
            max_kkt_residual: max_of(|r| r.kkt_residual),
            histogram: Histogram::new(&z_scores, -HIST_RANGE, HIST_RANGE, HIST_BINS),
            qq: qq_pairs(&z_scores),
            z_scores,
            sqrt_v_values,
        }
    }

    /// File-name tag, e.g. `cauchy_lam1_tau0.1`.
    pub fn tag(&self) -> String {
        format!("{}_lam{}_tau{}", self.noise.name(), self.lambda_units, self.tau)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub config: SimConfig,
    pub cells: Vec<CellReport>,
}

impl ExperimentReport {
    pub fn cell(&self, lambda_units: f64, tau: f64) -> Option<&CellReport> {
        self.cells
            .iter()
            .find(|c| c.lambda_units == lambda_units && c.tau == tau)
    }
}

/// All cells of the configured grid on shared replications.
pub fn run_experiment(cfg: &SimConfig) -> Result<ExperimentReport, SimError> {
    cfg.validate()?;
    let design = Design::new(cfg)?;
    run_with_design(cfg, &design)
}

/// As [`run_experiment`] with a caller-supplied covariance.
pub fn run_with_design(cfg: &SimConfig, design: &Design) -> Result<ExperimentReport, SimError> {
    cfg.validate()?;
    if design.sigma.shape() != (cfg.p, cfg.p) {
        return Err(SimError::InvalidConfig("design covariance has the wrong size".into()));
    }
    let cells = cfg.cells();
    let done = std::sync::atomic::AtomicUsize::new(0);
    let per_rep: Vec<Vec<Result<RepOutcome, Failure>>> = (0..cfg.reps)
        .into_par_iter()
        .map(|rep| {
            let inst = draw_instance(cfg, design, rep);
            let mut warm: Option<DVector<f64>> = None;
            let out = cells
                .iter()
                .map(|&(l, t)| {
                    let (o, b) = run_rep_cell(cfg, design, &inst, l, t, warm.as_ref(), rep);
                    if b.is_some() {
                        warm = b;
                    }
                    o
                })
                .collect();
            let k = done.fetch_add(1, std::sync::atomic::Ordering::Relaxed) + 1;
            if k % 100 == 0 {
                log::info!("{} noise: {k}/{} replications", cfg.noise.name(), cfg.reps);
            }
            out
        })
        .collect();
    let reports = cells
        .iter()
        .enumerate()
        .map(|(c, &(l, t))| {
            let outcomes: Vec<Result<RepOutcome, Failure>> = per_rep.iter().map(|r| r[c]).collect();
            CellReport::from_outcomes(cfg, l, t, &outcomes)
        })
        .collect();
    Ok(ExperimentReport {
        config: cfg.clone(),
        cells: reports,
    })
}

/// A single cell, `lambda` in units of `n^{-1/2}`.
pub fn run_cell(cfg: &SimConfig, lambda_units: f64, tau: f64) -> Result<CellReport, SimError> {
    let mut one = cfg.clone();
    one.lambda_grid = vec![lambda_units];
    one.tau_grid = vec![tau];
    Ok(run_experiment(&one)?.cells.remove(0))
}

pub const KS_MIN_SAMPLES: usize = 50;

/// One-sample Kolmogorov-Smirnov test against the standard normal, with the
/// asymptotic p-value `2 sum_k (-1)^{k-1} exp(-2 k^2 t^2)`.
pub fn ks_normal(samples: &[f64]) -> Result<KsResult, SimError> {
    let m = samples.len();
    if m < KS_MIN_SAMPLES {
        return Err(SimError::TooFewSamples {
            needed: KS_MIN_SAMPLES,
            got: m,
        });
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let mf = m as f64;
    let statistic = s
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = normal::cdf(x);
            (f - i as f64 / mf).max((i + 1) as f64 / mf - f)
        })
        .fold(0.0, f64::max);
    let t = (mf.sqrt() + 0.12 + 0.11 / mf.sqrt()) * statistic;
    Ok(KsResult {
        statistic,
        p_value: kolmogorov_survival(t),
    })
}

fn kolmogorov_survival(t: f64) -> f64 {
    if t < 0.2 {
        // the alternating series is useless here and the answer is 1 to
        // double precision
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * t * t).exp();
        sum += if k % 2 == 1 { term } else { -term };
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// `(Phi^{-1}((i - 1/2) / m), z_(i))`, ascending in both coordinates.
pub fn qq_pairs(values: &[f64]) -> Vec<(f64, f64)> {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() as f64;
    s.into_iter()
        .enumerate()
        .map(|(i, v)| (normal::quantile((i as f64 + 0.5) / m), v))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoxStats {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub whisker_lo: f64,
    pub whisker_hi: f64,
    pub outliers: usize,
}

fn quantile_sorted(s: &[f64], q: f64) -> f64 {
    let pos = q * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    s[lo] + (pos - lo as f64) * (s[hi] - s[lo])
}

/// Quartiles with whiskers at the most extreme points within 1.5 IQR.
pub fn box_stats(values: &[f64]) -> Option<BoxStats> {
    if values.is_empty() {
        return None;
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let q1 = quantile_sorted(&s, 0.25);
    let median = quantile_sorted(&s, 0.5);
    let q3 = quantile_sorted(&s, 0.75);
    let iqr = q3 - q1;
    let (fence_lo, fence_hi) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let inside: Vec<f64> = s
        .iter()
        .copied()
        .filter(|&v| v >= fence_lo && v <= fence_hi)
        .collect();
    Some(BoxStats {
        q1,
        median,
        q3,
        whisker_lo: inside.first().copied().unwrap_or(q1),
        whisker_hi: inside.last().copied().unwrap_or(q3),
        outliers: s.len() - inside.len(),
    })
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    noise: &'a str,
    lambda_units: f64,
    lambda: f64,
    tau: f64,
    reps: usize,
    completed: usize,
    failures: usize,
    n_hat_mean: f64,
    n_hat_sd: f64,
    n_hat_se: f64,
    df_mean: f64,
    df_sd: f64,
    df_se: f64,
    support_mean: f64,
    support_sd: f64,
    support_se: f64,
    sqrt_v_over_n_mean: f64,
    sqrt_v_over_n_sd: f64,
    sqrt_v_over_n_se: f64,
    coverage: f64,
    ks_statistic: Option<f64>,
    ks_p_value: Option<f64>,
    pseudo_inverse_reps: usize,
    outside_theorem_assumptions: bool,
}

#[derive(Serialize)]
struct BoxRow<'a> {
    noise: &'a str,
    lambda_units: f64,
    tau: f64,
    q1: f64,
    median: f64,
    q3: f64,
    whisker_lo: f64,
    whisker_hi: f64,
    outliers: usize,
}

#[derive(Serialize)]
struct ZScoreFile<'a> {
    cell: String,
    noise: &'a str,
    lambda_units: f64,
    tau: f64,
    z_scores: &'a [f64],
}

/// Writes `summary.csv`, `boxplot_data.csv`, and per cell
/// `zscores_<tag>.json`, `hist_<tag>.svg`, `qq_<tag>.svg`. Nothing is written
/// if some cell has no z-scores.
pub fn emit_report(report: &ExperimentReport, out_dir: &Path) -> Result<Vec<PathBuf>, SimError> {
    if report.cells.is_empty() {
        return Err(SimError::EmptyScores("<none>".into()));
    }
    for c in &report.cells {
        if c.z_scores.is_empty() {
            return Err(SimError::EmptyScores(c.tag()));
        }
    }
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();

    let path = out_dir.join("summary.csv");
    let mut w = csv::Writer::from_path(&path)?;
    for c in &report.cells {
        w.serialize(SummaryRow {
            noise: c.noise.name(),
            lambda_units: c.lambda_units,
            lambda: c.lambda,
            tau: c.tau,
            reps: c.reps,
            completed: c.completed,
            failures: c.failures.total(),
            n_hat_mean: c.n_hat.mean,
            n_hat_sd: c.n_hat.sd,
            n_hat_se: c.n_hat.se,
            df_mean: c.df.mean,
            df_sd: c.df.sd,
            df_se: c.df.se,
            support_mean: c.support.mean,
            support_sd: c.support.sd,
            support_se: c.support.se,
            sqrt_v_over_n_mean: c.sqrt_v_over_n.mean,
            sqrt_v_over_n_sd: c.sqrt_v_over_n.sd,
            sqrt_v_over_n_se: c.sqrt_v_over_n.se,
            coverage: c.coverage,
            ks_statistic: c.ks.map(|k| k.statistic),
            ks_p_value: c.ks.map(|k| k.p_value),
            pseudo_inverse_reps: c.pseudo_inverse_reps,
            outside_theorem_assumptions: c.outside_theorem_assumptions,
        })?;
    }
    w.flush()?;
    written.push(path);

    let path = out_dir.join("boxplot_data.csv");
    let mut w = csv::Writer::from_path(&path)?;
    for c in &report.cells {
        if let Some(b) = box_stats(&c.sqrt_v_values) {
            w.serialize(BoxRow {
                noise: c.noise.name(),
                lambda_units: c.lambda_units,
                tau: c.tau,
                q1: b.q1,
                median: b.median,
                q3: b.q3,
                whisker_lo: b.whisker_lo,
                whisker_hi: b.whisker_hi,
                outliers: b.outliers,
            })?;
        }
    }
    w.flush()?;
    written.push(path);

    for c in &report.cells {
        let tag = c.tag();
        let path = out_dir.join(format!("zscores_{tag}.json"));
        let body = ZScoreFile {
            cell: tag.clone(),
            noise: c.noise.name(),
            lambda_units: c.lambda_units,
            tau: c.tau,
            z_scores: &c.z_scores,
        };
        fs::write(&path, serde_json::to_string_pretty(&body)?)?;
        written.push(path);

        let path = out_dir.join(format!("hist_{tag}.svg"));
        fs::write(&path, histogram_svg(&c.histogram, &tag))?;
        written.push(path);

        let path = out_dir.join(format!("qq_{tag}.svg"));
        fs::write(&path, qq_svg(&c.qq, &tag))?;
        written.push(path);
    }
    Ok(written)
}

const W: f64 = 320.0;
const H: f64 = 240.0;
const PAD: f64 = 30.0;

fn svg_open(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <title>{title}</title>\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n"
    )
}

/// Histogram normalized as a density, with the standard normal curve.
pub fn histogram_svg(h: &Histogram, title: &str) -> String {
    let total: usize = h.counts.iter().sum::<usize>() + h.below + h.above;
    let width = (h.hi - h.lo) / h.counts.len() as f64;
    let dens: Vec<f64> = h
        .counts
        .iter()
        .map(|&c| c as f64 / (total.max(1) as f64 * width))
        .collect();
    let ymax = dens.iter().copied().fold(0.45, f64::max);
    let sx = |x: f64| PAD + (x - h.lo) / (h.hi - h.lo) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - y / ymax * (H - 2.0 * PAD);
    let mut s = svg_open(title);
    for (k, d) in dens.iter().enumerate() {
        let x0 = h.lo + k as f64 * width;
        s.push_str(&format!(
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"steelblue\" stroke=\"white\"/>\n",
            sx(x0),
            sy(*d),
            sx(x0 + width) - sx(x0),
            sy(0.0) - sy(*d)
        ));
    }
    let pts: Vec<String> = (0..=200)
        .map(|i| {
            let x = h.lo + (h.hi - h.lo) * i as f64 / 200.0;
            let y = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
            format!("{:.2},{:.2}", sx(x), sy(y))
        })
        .collect();
    s.push_str(&format!(
        "<polyline points=\"{}\" fill=\"none\" stroke=\"red\"/>\n",
        pts.join(" ")
    ));
    s.push_str(&format!(
        "<line x1=\"{PAD}\" y1=\"{0:.2}\" x2=\"{1:.2}\" y2=\"{0:.2}\" stroke=\"black\"/>\n</svg>\n",
        sy(0.0),
        W - PAD
    ));
    s
}

/// Normal QQ plot with the diagonal `y = x` in red.
pub fn qq_svg(pairs: &[(f64, f64)], title: &str) -> String {
    let lim = pairs
        .iter()
        .flat_map(|&(a, b)| [a.abs(), b.abs()])
        .filter(|v| v.is_finite())
        .fold(3.0, f64::max)
        .min(10.0);
    let sx = |x: f64| PAD + (x.clamp(-lim, lim) + lim) / (2.0 * lim) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y.clamp(-lim, lim) + lim) / (2.0 * lim) * (H - 2.0 * PAD);
    let mut s = svg_open(title);
    s.push_str(&format!(
        "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"red\"/>\n",
        sx(-lim),
        sy(-lim),
        sx(lim),
        sy(lim)
    ));
    for &(a, b) in pairs {
        s.push_str(&format!(
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"1.5\" fill=\"black\"/>\n",
            sx(a),
            sy(b)
        ));
    }
    s.push_str("</svg>\n");
    s
}

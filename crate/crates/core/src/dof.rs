//! The divergence `trace[d psi(y - X beta_hat(y)) / d y]` at fixed `X`.
//!
//! For the Huber loss with the Elastic-Net penalty it has the closed form
//! `n_hat - df` with
//!
//! `df = trace[D X_S (X_S' D X_S + n tau I)^{-1} X_S' D]`, `D = diag(psi')`,
//!
//! where `S` is the active set. For any loss and penalty it can be estimated
//! by central differences of refits, either coordinate by coordinate or with
//! random Rademacher probes.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::losses::Loss;
use crate::penalties::Penalty;
use crate::solver::{self, FitResult, SolverError, SolverOptions};

#[derive(Debug, Error)]
pub enum DofError {
    #[error("closed-form trace requires the Huber loss")]
    NotHuber,
    #[error("{0}")]
    UnsupportedPenalty(&'static str),
    #[error("active Gram matrix is singular (rank {rank} < {size}) and tau = 0")]
    SingularActiveGram { rank: usize, size: usize },
    #[error("bound violated: {which} (slack {slack:.3e})")]
    BoundViolated { which: &'static str, slack: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceMethod {
    ClosedForm,
    FiniteDifference,
    Hutchinson,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TraceDiagnostics {
    /// Refits (finite differences) or probes (Hutchinson).
    pub probes: usize,
    pub step: Option<f64>,
    pub condition_estimate: Option<f64>,
    /// Coordinates left out because their residual sits next to a kink.
    pub skipped: Vec<usize>,
    /// Coordinates whose step was shrunk because a refit at the full step
    /// changed the active set or moved a residual across a kink.
    pub refined: Vec<usize>,
    /// Coordinates where even the smallest step changed the pattern; their
    /// difference quotient straddles a kink.
    pub unresolved: Vec<usize>,
    pub std_error: Option<f64>,
    /// The active Gram matrix was rank deficient and a pseudo-inverse was used.
    pub pseudo_inverse: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceReport {
    pub trace_value: f64,
    pub method: TraceMethod,
    pub n_hat: Option<usize>,
    pub df: Option<f64>,
    pub diagnostics: TraceDiagnostics,
}

/// Closed-form `trace = n_hat - df` for the Huber loss with an Elastic-Net
/// (or ridge) penalty. With `tau = 0` the active Gram matrix must be
/// invertible.
pub fn huber_enet_trace(
    fit: &FitResult,
    x: &DMatrix<f64>,
    penalty: &Penalty,
) -> Result<TraceReport, DofError> {
    closed_form(fit, x, penalty, false)
}

/// As [`huber_enet_trace`], falling back to the pseudo-inverse when `tau = 0`
/// and the active Gram matrix is rank deficient; the fallback is flagged.
pub fn huber_enet_trace_pinv(
    fit: &FitResult,
    x: &DMatrix<f64>,
    penalty: &Penalty,
) -> Result<TraceReport, DofError> {
    closed_form(fit, x, penalty, true)
}

fn closed_form(
    fit: &FitResult,
    x: &DMatrix<f64>,
    penalty: &Penalty,
    allow_pinv: bool,
) -> Result<TraceReport, DofError> {
    let n_hat = fit.n_hat.ok_or(DofError::NotHuber)?;
    if fit.psi_prime.iter().any(|&d| d != 0.0 && d != 1.0) {
        return Err(DofError::NotHuber);
    }
    if x.shape() != (fit.n(), fit.p()) {
        return Err(DofError::InvalidArgument(format!(
            "design is {:?} but the fit is {}x{}",
            x.shape(),
            fit.n(),
            fit.p()
        )));
    }
    let n = x.nrows() as f64;
    let tau = penalty.tau();
    let rows: Vec<usize> = (0..fit.n()).filter(|&i| fit.psi_prime[i] == 1.0).collect();
    let cols = &fit.active_set;
    let k = cols.len();
    let mut diag = TraceDiagnostics::default();
    let df = if k == 0 || rows.is_empty() {
        0.0
    } else {
        let z = x.select_rows(&rows).select_columns(cols);
        let gram = z.tr_mul(&z);
        if tau > 0.0 {
            let mut shifted = gram.clone();
            for d in 0..k {
                shifted[(d, d)] += n * tau;
            }
            let chol = shifted
                .cholesky()
                .ok_or(DofError::InvalidArgument("non-finite active Gram matrix".into()))?;
            let l = chol.l();
            let dmax = l.diagonal().max();
            let dmin = l.diagonal().min();
            diag.condition_estimate = Some((dmax / dmin).powi(2));
            chol.solve(&gram).trace()
        } else {
            let eig = gram.symmetric_eigen();
            let top = eig.eigenvalues.amax();
            let thr = top * 1e-10 * k as f64;
            let rank = eig.eigenvalues.iter().filter(|&&m| m > thr).count();
            let bottom = eig.eigenvalues.min().max(0.0);
            diag.condition_estimate = Some(if bottom > 0.0 { top / bottom } else { f64::INFINITY });
            if rank < k {
                if !allow_pinv {
                    return Err(DofError::SingularActiveGram { rank, size: k });
                }
                diag.pseudo_inverse = true;
            }
            // trace of the projection onto the column space of Z
            rank as f64
        }
    };
    Ok(TraceReport {
        trace_value: n_hat as f64 - df,
        method: TraceMethod::ClosedForm,
        n_hat: Some(n_hat),
        df: Some(df),
        diagnostics: diag,
    })
}

const FD_REDUCTION: f64 = 10.0;
const FD_MAX_REDUCTIONS: u32 = 2;

/// Default central-difference step `1e-4 (1 + |y|_inf)`.
pub fn default_step(y: &DVector<f64>) -> f64 {
    1e-4 * (1.0 + y.amax())
}

/// Coordinate-wise central-difference trace, refitting at `y +- h e_i`.
/// When a refit leaves the smooth piece of the base fit the step for that
/// coordinate is shrunk tenfold, at most twice.
pub fn finite_difference_trace<L: Loss + ?Sized>(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    loss: &L,
    penalty: &Penalty,
    h: Option<f64>,
    opts: &SolverOptions,
) -> Result<TraceReport, DofError> {
    let base = solver::fit(x, y, loss, penalty, opts)?;
    finite_difference_trace_from(&base, x, y, loss, penalty, h, opts)
}

/// As [`finite_difference_trace`], reusing a converged fit at `y`.
pub fn finite_difference_trace_from<L: Loss + ?Sized>(
    base: &FitResult,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    loss: &L,
    penalty: &Penalty,
    h: Option<f64>,
    opts: &SolverOptions,
) -> Result<TraceReport, DofError> {
    let h = h.unwrap_or_else(|| default_step(y));
    if !(h > 0.0 && h.is_finite()) {
        return Err(DofError::InvalidArgument(format!("step must be positive, got {h}")));
    }
    let n = y.len();
    let kinks = loss.kinks();
    let near_kink = |r: f64| kinks.iter().any(|&c| (r.abs() - c).abs() < 10.0 * h);
    let skipped: Vec<usize> = (0..n).filter(|&i| near_kink(base.residuals[i])).collect();
    if !skipped.is_empty() {
        log::warn!("{} coordinates skipped next to a kink of psi'", skipped.len());
    }
    let coords: Vec<usize> = (0..n).filter(|i| !skipped.contains(i)).collect();
    // A difference quotient is only a derivative if both refits stay on the
    // smooth piece of the base fit: same active set, same kink zones.
    let zone = |r: f64| kinks.iter().filter(|&&c| r.abs() > c).count();
    let base_zones: Vec<usize> = base.residuals.iter().map(|&r| zone(r)).collect();
    let same_piece = |f: &FitResult| {
        f.active_set == base.active_set && f.residuals.iter().zip(&base_zones).all(|(&r, &z)| zone(r) == z)
    };
    let terms: Vec<Result<(f64, u32, bool), SolverError>> = coords
        .par_iter()
        .map(|&i| {
            let refit = |step: f64| -> Result<FitResult, SolverError> {
                let mut yp = y.clone();
                yp[i] += step;
                solver::fit_from(x, &yp, loss, penalty, opts, &base.beta_hat)
            };
            let mut hi = h;
            let mut reductions = 0;
            loop {
                let plus = refit(hi)?;
                let minus = refit(-hi)?;
                let clean = same_piece(&plus) && same_piece(&minus);
                if clean || reductions == FD_MAX_REDUCTIONS {
                    return Ok(((plus.psi[i] - minus.psi[i]) / (2.0 * hi), reductions, clean));
                }
                hi /= FD_REDUCTION;
                reductions += 1;
            }
        })
        .collect();
    let mut trace = 0.0;
    let mut probes = 0;
    let mut refined = Vec::new();
    let mut unresolved = Vec::new();
    for (&i, t) in coords.iter().zip(terms) {
        let (d, reductions, clean) = t?;
        trace += d;
        probes += 2 * (reductions as usize + 1);
        if reductions > 0 {
            refined.push(i);
        }
        if !clean {
            unresolved.push(i);
        }
    }
    if !unresolved.is_empty() {
        log::warn!("{} difference quotients straddle a kink even at the smallest step", unresolved.len());
    }
    Ok(TraceReport {
        trace_value: trace,
        method: TraceMethod::FiniteDifference,
        n_hat: base.n_hat,
        df: base.n_hat.map(|m| m as f64 - trace),
        diagnostics: TraceDiagnostics {
            probes,
            step: Some(h),
            skipped,
            refined,
            unresolved,
            ..Default::default()
        },
    })
}

/// `v' [psi(y + h v) - psi(y - h v)] / (2h)`, a central difference of the
/// divergence along `v`.
pub fn directional_divergence<L: Loss + ?Sized>(
    base: &FitResult,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    loss: &L,
    penalty: &Penalty,
    v: &DVector<f64>,
    h: f64,
    opts: &SolverOptions,
) -> Result<f64, SolverError> {
    let plus = solver::fit_from(x, &(y + v * h), loss, penalty, opts, &base.beta_hat)?;
    let minus = solver::fit_from(x, &(y - v * h), loss, penalty, opts, &base.beta_hat)?;
    Ok(v.dot(&(plus.psi - minus.psi)) / (2.0 * h))
}

/// Randomized trace estimate with `probes` Rademacher directions. The probes
/// are drawn from a ChaCha stream seeded by `seed`, so the estimate is
/// reproducible bit for bit.
#[allow(clippy::too_many_arguments)]
pub fn hutchinson_trace<L: Loss + ?Sized>(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    loss: &L,
    penalty: &Penalty,
    probes: usize,
    seed: u64,
    h: Option<f64>,
    opts: &SolverOptions,
) -> Result<TraceReport, DofError> {
    if probes < 2 {
        return Err(DofError::InvalidArgument("need at least 2 probes".into()));
    }
    let base = solver::fit(x, y, loss, penalty, opts)?;
    let h = h.unwrap_or_else(|| default_step(y));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dirs: Vec<DVector<f64>> = (0..probes)
        .map(|_| DVector::from_fn(y.len(), |_, _| if rng.random::<bool>() { 1.0 } else { -1.0 }))
        .collect();
    let vals: Vec<Result<f64, SolverError>> = dirs
        .par_iter()
        .map(|v| directional_divergence(&base, x, y, loss, penalty, v, h, opts))
        .collect();
    let vals = vals.into_iter().collect::<Result<Vec<f64>, _>>()?;
    let m = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / m;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0);
    Ok(TraceReport {
        trace_value: mean,
        method: TraceMethod::Hutchinson,
        n_hat: base.n_hat,
        df: base.n_hat.map(|k| k as f64 - mean),
        diagnostics: TraceDiagnostics {
            probes,
            step: Some(h),
            std_error: Some((var / m).sqrt()),
            ..Default::default()
        },
    })
}

/// Operator-norm and semidefinite bounds on
///
/// * `M = (X' D X + n tau I)^{-1}`
/// * `V = D - D X M X' D`
///
/// for a twice differentiable (ridge) penalty. Slacks are `bound - value`
/// for norm bounds and minimum eigenvalues for semidefinite bounds, so a
/// bound holds when its slack is nonnegative.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VnmReport {
    pub dxm_norm: f64,
    pub dxm_bound: f64,
    pub dxm_slack: f64,
    /// min eig of `I / (n tau) - M`
    pub m_slack: f64,
    /// min eig of `V - c D` with `c = (L |X/sqrt n|_op^2 / tau + 1)^{-1}`
    pub v_lower_slack: f64,
    /// min eig of `D - V`
    pub v_upper_slack: f64,
    /// min eig of `L I - D`
    pub d_slack: f64,
    pub trace_v: f64,
    pub numeric_trace: Option<f64>,
    pub relative_trace_error: Option<f64>,
}

pub const VNM_SLACK_TOL: f64 = 1e-10;
pub const VNM_TRACE_RTOL: f64 = 1e-3;

pub fn vnm_cross_check<L: Loss + ?Sized>(
    fit: &FitResult,
    x: &DMatrix<f64>,
    loss: &L,
    penalty: &Penalty,
    numeric_trace: Option<f64>,
) -> Result<VnmReport, DofError> {
    if penalty.lambda() != 0.0 {
        return Err(DofError::UnsupportedPenalty(
            "matrix bounds need a twice differentiable penalty (ridge)",
        ));
    }
    let (n, p) = x.shape();
    let nf = n as f64;
    let tau = penalty.tau();
    let lip = loss.lipschitz();
    let d = &fit.psi_prime;
    let dx = DMatrix::from_fn(n, p, |i, j| d[i] * x[(i, j)]);
    let mut a = x.tr_mul(&dx);
    for k in 0..p {
        a[(k, k)] += nf * tau;
    }
    let m = a
        .cholesky()
        .ok_or(DofError::InvalidArgument("X'DX + n tau I not positive definite".into()))?
        .inverse();
    let dxm = &dx * &m;
    let dxm_norm = dxm.singular_values().max();
    let dxm_bound = 0.5 * lip.sqrt() / (nf * tau).sqrt();

    let mut m_gap = -&m;
    for k in 0..p {
        m_gap[(k, k)] += 1.0 / (nf * tau);
    }
    let m_slack = min_eig(m_gap);

    let dmat = DMatrix::from_diagonal(d);
    let v = &dmat - &dxm * dx.transpose();
    let v = (&v + v.transpose()) * 0.5;
    let x_op_sq = (x.tr_mul(x) / nf).symmetric_eigen().eigenvalues.max();
    let c = 1.0 / (lip * x_op_sq / tau + 1.0);
    let v_lower_slack = min_eig(&v - &dmat * c);
    let v_upper_slack = min_eig(&dmat - &v);
    let d_slack = lip - d.max();
    let trace_v = v.trace();
    let relative_trace_error = numeric_trace.map(|t| (trace_v - t).abs() / trace_v.abs());

    let report = VnmReport {
        dxm_norm,
        dxm_bound,
        dxm_slack: dxm_bound - dxm_norm,
        m_slack,
        v_lower_slack,
        v_upper_slack,
        d_slack,
        trace_v,
        numeric_trace,
        relative_trace_error,
    };
    for (which, slack) in [
        ("|diag(psi') X M|_op <= sqrt(L) / (2 sqrt(n tau))", report.dxm_slack),
        ("M <= I / (n tau)", report.m_slack),
        ("c diag(psi') <= V", report.v_lower_slack),
        ("V <= diag(psi')", report.v_upper_slack),
        ("diag(psi') <= L I", report.d_slack),
    ] {
        if slack < -VNM_SLACK_TOL {
            return Err(DofError::BoundViolated { which, slack });
        }
    }
    if let Some(err) = relative_trace_error {
        if !(err <= VNM_TRACE_RTOL) {
            return Err(DofError::BoundViolated {
                which: "trace[V] == numeric trace",
                slack: VNM_TRACE_RTOL - err,
            });
        }
    }
    Ok(report)
}

fn min_eig(a: DMatrix<f64>) -> f64 {
    a.symmetric_eigen().eigenvalues.min()
}

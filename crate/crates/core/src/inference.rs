//! Debiased estimates, the data-driven variance `V_hat`, confidence
//! intervals and the oracle pivots `xi_j`, `xi'_j`.
//!
//! With `Omega = Sigma^{-1}` and `z_j = X Sigma^{-1} e_j / Omega_jj`, the
//! debiased estimate of `beta_j` is
//!
//! `beta_hat_j + Omega_jj psi' z_j / trace`
//!
//! and its interval half-width is `z_{(1+level)/2} sqrt(Omega_jj V_hat / n)`
//! with `V_hat = (|psi|^2 / n) / (trace / n)^2`. Here `trace` is the divergence
//! computed by [`crate::dof`].

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::normal;
use crate::solver::FitResult;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InferenceError {
    #[error("degenerate trace {trace:.3e} (n = {n}): the interval is unbounded")]
    DegenerateTrace { trace: f64, n: usize },
    #[error("psi vanishes identically")]
    ZeroPsi,
    #[error("covariance matrix is not symmetric positive definite")]
    NotPositiveDefinite,
    #[error("confidence level must lie in (0, 1), got {0}")]
    InvalidLevel(f64),
    #[error("coordinate {j} out of range for p = {p}")]
    IndexOutOfRange { j: usize, p: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// `|trace| / n` below this is treated as zero.
pub const DEGENERATE_TRACE_RATIO: f64 = 1e-8;
/// `trace / n` below this is flagged as near zero.
pub const NEAR_ZERO_TRACE_RATIO: f64 = 1e-2;

/// Known covariance of the rows of `X` and its precision.
#[derive(Debug, Clone)]
pub struct PrecisionInfo {
    sigma: DMatrix<f64>,
    sigma_inv: DMatrix<f64>,
    omega_diag: DVector<f64>,
}

impl PrecisionInfo {
    pub fn new(sigma: DMatrix<f64>) -> Result<Self, InferenceError> {
        if !sigma.is_square() || sigma.nrows() == 0 {
            return Err(InferenceError::DimensionMismatch(
                "covariance must be a nonempty square matrix".into(),
            ));
        }
        let asym = (&sigma - sigma.transpose()).amax();
        if !(asym <= 1e-10 * sigma.amax().max(1.0)) {
            return Err(InferenceError::NotPositiveDefinite);
        }
        let sym = (&sigma + sigma.transpose()) * 0.5;
        let chol = sym.clone().cholesky().ok_or(InferenceError::NotPositiveDefinite)?;
        let inv = chol.inverse();
        let sigma_inv = (&inv + inv.transpose()) * 0.5;
        let omega_diag = sigma_inv.diagonal();
        if omega_diag.iter().any(|&w| !(w > 0.0)) {
            return Err(InferenceError::NotPositiveDefinite);
        }
        Ok(PrecisionInfo {
            sigma: sym,
            sigma_inv,
            omega_diag,
        })
    }

    pub fn identity(p: usize) -> Self {
        PrecisionInfo {
            sigma: DMatrix::identity(p, p),
            sigma_inv: DMatrix::identity(p, p),
            omega_diag: DVector::from_element(p, 1.0),
        }
    }

    pub fn p(&self) -> usize {
        self.sigma.nrows()
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn sigma_inv(&self) -> &DMatrix<f64> {
        &self.sigma_inv
    }

    /// `Omega_jj = e_j' Sigma^{-1} e_j`.
    pub fn omega_jj(&self, j: usize) -> f64 {
        self.omega_diag[j]
    }

    /// `z_j = X Sigma^{-1} e_j / Omega_jj`.
    pub fn z(&self, x: &DMatrix<f64>, j: usize) -> DVector<f64> {
        x * self.sigma_inv.column(j) / self.omega_diag[j]
    }

    /// `Q_j = I - Sigma^{-1} e_j e_j' / Omega_jj`, so that
    /// `X = X Q_j + z_j e_j'`.
    pub fn q_matrix(&self, j: usize) -> DMatrix<f64> {
        let p = self.p();
        let mut q = DMatrix::identity(p, p);
        let col = self.sigma_inv.column(j) / self.omega_diag[j];
        for i in 0..p {
            q[(i, j)] -= col[i];
        }
        q
    }

    fn check(&self, x: &DMatrix<f64>, j: usize) -> Result<(), InferenceError> {
        if x.ncols() != self.p() {
            return Err(InferenceError::DimensionMismatch(format!(
                "design has {} columns but the covariance is {}x{}",
                x.ncols(),
                self.p(),
                self.p()
            )));
        }
        if j >= self.p() {
            return Err(InferenceError::IndexOutOfRange { j, p: self.p() });
        }
        Ok(())
    }
}

fn check_trace(trace_value: f64, n: usize) -> Result<(), InferenceError> {
    if !(trace_value.abs() >= DEGENERATE_TRACE_RATIO * n as f64) {
        return Err(InferenceError::DegenerateTrace {
            trace: trace_value,
            n,
        });
    }
    Ok(())
}

/// `V_hat = (|psi|^2 / n) / (trace / n)^2`.
pub fn variance_hat(psi: &DVector<f64>, trace_value: f64, n: usize) -> Result<f64, InferenceError> {
    check_trace(trace_value, n)?;
    let nf = n as f64;
    Ok((psi.norm_squared() / nf) / (trace_value / nf).powi(2))
}

/// `beta_hat_j + Omega_jj psi' z_j / trace`.
pub fn debias(
    fit: &FitResult,
    prec: &PrecisionInfo,
    x: &DMatrix<f64>,
    trace_value: f64,
    j: usize,
) -> Result<f64, InferenceError> {
    prec.check(x, j)?;
    check_trace(trace_value, fit.n())?;
    let z = prec.z(x, j);
    Ok(fit.beta_hat[j] + prec.omega_jj(j) * fit.psi.dot(&z) / trace_value)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Pivot {
    pub xi: f64,
    pub xi_prime: f64,
    /// `Omega_jj^{1/2} xi_j`
    pub z_xi: f64,
    /// `Omega_jj^{1/2} xi'_j`
    pub z_xi_prime: f64,
}

/// Pivots against a known true coefficient:
///
/// `xi_j = [psi' z_j - |z_j|^2 (beta_j - beta_hat_j) trace / n] / |psi|`
///
/// and `xi'_j` with `|z_j|^2 / n` replaced by `1 / Omega_jj`.
pub fn pivot_oracle(
    fit: &FitResult,
    prec: &PrecisionInfo,
    x: &DMatrix<f64>,
    trace_value: f64,
    j: usize,
    beta_true_j: f64,
) -> Result<Pivot, InferenceError> {
    prec.check(x, j)?;
    let psi_norm = fit.psi.norm();
    if psi_norm == 0.0 {
        return Err(InferenceError::ZeroPsi);
    }
    let n = fit.n() as f64;
    let z = prec.z(x, j);
    let omega = prec.omega_jj(j);
    let score = fit.psi.dot(&z);
    let gap = beta_true_j - fit.beta_hat[j];
    let xi = (score - z.norm_squared() / n * gap * trace_value) / psi_norm;
    let xi_prime = (score - gap * trace_value / omega) / psi_norm;
    Ok(Pivot {
        xi,
        xi_prime,
        z_xi: omega.sqrt() * xi,
        z_xi_prime: omega.sqrt() * xi_prime,
    })
}

/// `Omega_jj^{1/2} xi'_j` written through `n_hat - df`:
///
/// `[(n_hat - df)(beta_hat_j - beta_j) + Omega_jj z_j' psi] / (|psi| Omega_jj^{1/2})`.
pub fn pivot_from_df(
    fit: &FitResult,
    prec: &PrecisionInfo,
    x: &DMatrix<f64>,
    n_hat: f64,
    df: f64,
    j: usize,
    beta_true_j: f64,
) -> Result<f64, InferenceError> {
    prec.check(x, j)?;
    let psi_norm = fit.psi.norm();
    if psi_norm == 0.0 {
        return Err(InferenceError::ZeroPsi);
    }
    let omega = prec.omega_jj(j);
    let z = prec.z(x, j);
    Ok(((n_hat - df) * (fit.beta_hat[j] - beta_true_j) + omega * z.dot(&fit.psi))
        / (psi_norm * omega.sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
    pub center: f64,
    pub half_width: f64,
    /// The trace vanished and the interval is the whole line.
    pub degenerate: bool,
}

impl Interval {
    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }
}

pub fn confidence_interval(
    fit: &FitResult,
    prec: &PrecisionInfo,
    x: &DMatrix<f64>,
    trace_value: f64,
    j: usize,
    level: f64,
) -> Result<Interval, InferenceError> {
    if !(level > 0.0 && level < 1.0) {
        return Err(InferenceError::InvalidLevel(level));
    }
    prec.check(x, j)?;
    if fit.psi_is_zero || fit.psi.norm() == 0.0 {
        return Err(InferenceError::ZeroPsi);
    }
    let n = fit.n();
    let v_hat = match variance_hat(&fit.psi, trace_value, n) {
        Ok(v) => v,
        Err(InferenceError::DegenerateTrace { .. }) => {
            return Ok(Interval {
                lo: f64::NEG_INFINITY,
                hi: f64::INFINITY,
                center: fit.beta_hat[j],
                half_width: f64::INFINITY,
                degenerate: true,
            })
        }
        Err(e) => return Err(e),
    };
    let center = debias(fit, prec, x, trace_value, j)?;
    let half_width = normal::two_sided_multiplier(level) * (prec.omega_jj(j) * v_hat / n as f64).sqrt();
    Ok(Interval {
        lo: center - half_width,
        hi: center + half_width,
        center,
        half_width,
        degenerate: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoordinateInference {
    pub j: usize,
    pub beta_hat: f64,
    pub debiased: f64,
    pub lo: f64,
    pub hi: f64,
    pub omega_jj: f64,
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InferenceResult {
    pub level: f64,
    /// Shared across coordinates; `None` when the trace is degenerate.
    pub v_hat: Option<f64>,
    pub trace_value: f64,
    pub psi_norm: f64,
    pub coords: Vec<CoordinateInference>,
    pub flags: Vec<String>,
}

/// Intervals for the zero-based coordinates `coords`.
pub fn infer(
    fit: &FitResult,
    prec: &PrecisionInfo,
    x: &DMatrix<f64>,
    trace_value: f64,
    coords: &[usize],
    level: f64,
) -> Result<InferenceResult, InferenceError> {
    let n = fit.n();
    let mut flags = Vec::new();
    let v_hat = match variance_hat(&fit.psi, trace_value, n) {
        Ok(v) => Some(v),
        Err(InferenceError::DegenerateTrace { .. }) => {
            flags.push("degenerate_trace".to_string());
            None
        }
        Err(e) => return Err(e),
    };
    if trace_value / (n as f64) < NEAR_ZERO_TRACE_RATIO {
        flags.push("near_zero_trace".to_string());
    }
    let mut rows = Vec::with_capacity(coords.len());
    for &j in coords {
        let ci = confidence_interval(fit, prec, x, trace_value, j, level)?;
        let mut f = flags.clone();
        if fit.active_set.binary_search(&j).is_err() {
            f.push("inactive".to_string());
        }
        rows.push(CoordinateInference {
            j,
            beta_hat: fit.beta_hat[j],
            debiased: ci.center,
            lo: ci.lo,
            hi: ci.hi,
            omega_jj: prec.omega_jj(j),
            flags: f,
        });
    }
    Ok(InferenceResult {
        level,
        v_hat,
        trace_value,
        psi_norm: fit.psi.norm(),
        coords: rows,
        flags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::evaluate_at;
    use crate::{Penalty, RobustLoss};

    fn toy() -> (DMatrix<f64>, DVector<f64>, FitResult) {
        let x = DMatrix::from_fn(6, 3, |i, j| ((i * 5 + j * 3) % 7) as f64 / 3.0 - 1.0);
        let y = DVector::from_fn(6, |i, _| (i as f64).sin() * 2.0);
        let beta = DVector::from_column_slice(&[0.3, 0.0, -0.2]);
        let f = evaluate_at(
            &x,
            &y,
            &RobustLoss::huber(1.0).unwrap(),
            &Penalty::elastic_net(0.1, 0.1).unwrap(),
            beta,
        );
        (x, y, f)
    }

    #[test]
    fn constant_psi_variance() {
        let psi = DVector::from_element(10, 0.7);
        let v = variance_hat(&psi, 4.0, 10).unwrap();
        assert!((v - 0.49 / 0.16).abs() < 1e-12);
        assert!(matches!(
            variance_hat(&psi, 0.0, 10),
            Err(InferenceError::DegenerateTrace { .. })
        ));
    }

    #[test]
    fn identity_covariance_reduces_to_columns() {
        let (x, _, f) = toy();
        let prec = PrecisionInfo::identity(3);
        let t = 2.5;
        for j in 0..3 {
            let d = debias(&f, &prec, &x, t, j).unwrap();
            let expected = f.beta_hat[j] + x.column(j).dot(&f.psi) / t;
            assert!((d - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn pivots_coincide_when_beta_is_exact() {
        let (x, _, f) = toy();
        let prec = PrecisionInfo::new(DMatrix::from_row_slice(
            3,
            3,
            &[2.0, 0.3, 0.1, 0.3, 1.0, 0.2, 0.1, 0.2, 1.5],
        ))
        .unwrap();
        let p = pivot_oracle(&f, &prec, &x, 3.0, 0, f.beta_hat[0]).unwrap();
        let expected = f.psi.dot(&prec.z(&x, 0)) / f.psi.norm();
        assert!((p.xi - expected).abs() < 1e-14);
        assert!((p.xi_prime - expected).abs() < 1e-14);
    }

    #[test]
    fn df_form_matches_pivot() {
        let (x, _, f) = toy();
        let prec = PrecisionInfo::new(DMatrix::from_row_slice(
            3,
            3,
            &[2.0, 0.3, 0.1, 0.3, 1.0, 0.2, 0.1, 0.2, 1.5],
        ))
        .unwrap();
        let (n_hat, df) = (5.0, 1.7);
        for j in 0..3 {
            let p = pivot_oracle(&f, &prec, &x, n_hat - df, j, 0.9).unwrap();
            let q = pivot_from_df(&f, &prec, &x, n_hat, df, j, 0.9).unwrap();
            assert!((p.z_xi_prime - q).abs() < 1e-12);
        }
    }

    #[test]
    fn decomposition_reconstructs_design() {
        let x = DMatrix::from_fn(7, 3, |i, j| ((i * 3 + j * 5) % 11) as f64 - 4.0);
        let prec = PrecisionInfo::new(DMatrix::from_row_slice(
            3,
            3,
            &[1.0, 0.5, 0.2, 0.5, 2.0, 0.1, 0.2, 0.1, 0.8],
        ))
        .unwrap();
        for j in 0..3 {
            let z = prec.z(&x, j);
            let mut ej = DMatrix::zeros(1, 3);
            ej[(0, j)] = 1.0;
            let rebuilt = &x * prec.q_matrix(j) + &z * ej;
            assert!((&x - rebuilt).norm() <= 1e-10 * x.norm());
        }
    }

    #[test]
    fn interval_widths_scale_with_omega() {
        let (x, _, f) = toy();
        let prec = PrecisionInfo::new(DMatrix::from_diagonal(&DVector::from_column_slice(&[
            1.0, 0.25, 4.0,
        ])))
        .unwrap();
        let ws: Vec<f64> = (0..3)
            .map(|j| confidence_interval(&f, &prec, &x, 3.0, j, 0.95).unwrap().half_width)
            .collect();
        // Omega = (1, 4, 1/4)
        assert!((ws[1] / ws[0] - 2.0).abs() < 1e-12);
        assert!((ws[2] / ws[0] - 0.5).abs() < 1e-12);
        let ci = confidence_interval(&f, &prec, &x, 3.0, 0, 0.95).unwrap();
        assert!(ci.lo <= ci.center && ci.center <= ci.hi);
    }

    #[test]
    fn degenerate_trace_gives_whole_line() {
        let (x, _, f) = toy();
        let prec = PrecisionInfo::identity(3);
        let ci = confidence_interval(&f, &prec, &x, 0.0, 1, 0.95).unwrap();
        assert!(ci.degenerate && ci.lo == f64::NEG_INFINITY && ci.hi == f64::INFINITY);
    }

    #[test]
    fn zero_psi_is_rejected() {
        let (x, _, mut f) = toy();
        f.psi.fill(0.0);
        f.psi_is_zero = true;
        let prec = PrecisionInfo::identity(3);
        assert_eq!(
            confidence_interval(&f, &prec, &x, 3.0, 0, 0.95),
            Err(InferenceError::ZeroPsi)
        );
        assert!(matches!(
            pivot_oracle(&f, &prec, &x, 3.0, 0, 0.0),
            Err(InferenceError::ZeroPsi)
        ));
    }

    #[test]
    fn non_spd_covariance_rejected() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(PrecisionInfo::new(bad), Err(InferenceError::NotPositiveDefinite)));
    }

    #[test]
    fn invalid_level() {
        let (x, _, f) = toy();
        let prec = PrecisionInfo::identity(3);
        assert_eq!(
            confidence_interval(&f, &prec, &x, 3.0, 0, 1.0),
            Err(InferenceError::InvalidLevel(1.0))
        );
    }
}

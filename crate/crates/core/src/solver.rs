//! Penalized M-estimation
//!
//! `beta_hat = argmin_b (1/n) sum_i rho(y_i - x_i'b) + g(b)`
//!
//! solved by accelerated proximal gradient (FISTA) with backtracking and
//! objective-based momentum restart. Once the iterates have settled on a
//! support, an active-set Newton step on the smooth restricted problem is
//! tried; for the Huber loss this step is exact as soon as the residual zones
//! are identified. Either way a result is only reported as converged when the
//! KKT residual `dist(X'psi/n, dg(beta_hat))` is below `kkt_tol`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::Loss;
use crate::penalties::Penalty;
use crate::serde_vec;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("non-finite input: {0}")]
    NonFiniteInput(&'static str),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid solver options: {0}")]
    InvalidOptions(String),
    #[error("no convergence after {} iterations (KKT residual {:.3e})", .best.iterations, .best.kkt_residual)]
    MaxIterExceeded { best: Box<FitResult> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub max_iter: usize,
    pub kkt_tol: f64,
    /// Initial step; `None` means `n / (L * |X|_op^2)` from a power iteration.
    pub initial_step: Option<f64>,
    pub backtrack_factor: f64,
    pub accelerate: bool,
    /// Active-set Newton refinement.
    pub polish: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            max_iter: 50_000,
            kkt_tol: 1e-8,
            initial_step: None,
            backtrack_factor: 0.5,
            accelerate: true,
            polish: true,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<(), SolverError> {
        if self.max_iter < 1 {
            return Err(SolverError::InvalidOptions("max_iter must be >= 1".into()));
        }
        if !(self.kkt_tol > 0.0) {
            return Err(SolverError::InvalidOptions("kkt_tol must be > 0".into()));
        }
        if !(self.backtrack_factor > 0.0 && self.backtrack_factor < 1.0) {
            return Err(SolverError::InvalidOptions(
                "backtrack_factor must lie in (0, 1)".into(),
            ));
        }
        if let Some(s) = self.initial_step {
            if !(s > 0.0 && s.is_finite()) {
                return Err(SolverError::InvalidOptions("initial_step must be > 0".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    #[serde(with = "serde_vec")]
    pub beta_hat: DVector<f64>,
    /// `y - X beta_hat`
    #[serde(with = "serde_vec")]
    pub residuals: DVector<f64>,
    #[serde(with = "serde_vec")]
    pub psi: DVector<f64>,
    #[serde(with = "serde_vec")]
    pub psi_prime: DVector<f64>,
    /// Zero-based indices of the nonzero coefficients.
    pub active_set: Vec<usize>,
    /// Number of residuals in the quadratic zone (Huber loss only).
    pub n_hat: Option<usize>,
    pub kkt_residual: f64,
    pub objective: f64,
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Set when every entry of `psi` vanishes, which happens with
    /// probability zero for continuous noise.
    pub psi_is_zero: bool,
}

impl FitResult {
    pub fn n(&self) -> usize {
        self.residuals.len()
    }

    pub fn p(&self) -> usize {
        self.beta_hat.len()
    }

    pub fn psi_norm(&self) -> f64 {
        self.psi.norm()
    }
}

/// Relative threshold below which a coefficient is treated as zero.
pub const ACTIVE_THRESHOLD: f64 = 1e-10;

pub fn active_set(beta: &DVector<f64>) -> Vec<usize> {
    let thr = ACTIVE_THRESHOLD * beta.amax().max(1.0);
    beta.iter()
        .enumerate()
        .filter(|(_, b)| b.abs() > thr)
        .map(|(j, _)| j)
        .collect()
}

pub fn objective<L: Loss + ?Sized>(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    loss: &L,
    penalty: &Penalty,
    b: &DVector<f64>,
) -> f64 {
    let r = y - x * b;
    smooth_value(loss, &r) + penalty.value(b)
}

/// `dist(X' psi(y - X b) / n, dg(b))` in the sup norm.
pub fn kkt_residual<L: Loss + ?Sized>(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    loss: &L,
    penalty: &Penalty,
    b: &DVector<f64>,
) -> f64 {
    let r = y - x * b;
    let psi = r.map(|v| loss.psi(v));
    let u = x.tr_mul(&psi) / x.nrows() as f64;
    penalty.kkt_distance(b, &u)
}

fn smooth_value<L: Loss + ?Sized>(loss: &L, r: &DVector<f64>) -> f64 {
    r.iter().map(|&v| loss.rho(v)).sum::<f64>() / r.len() as f64
}

fn check_inputs(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    start: Option<&DVector<f64>>,
) -> Result<(), SolverError> {
    let (n, p) = x.shape();
    if n < 1 || p < 1 {
        return Err(SolverError::DimensionMismatch(format!(
            "design must be at least 1x1, got {n}x{p}"
        )));
    }
    if y.len() != n {
        return Err(SolverError::DimensionMismatch(format!(
            "y has length {} but X has {n} rows",
            y.len()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(SolverError::NonFiniteInput("design matrix"));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(SolverError::NonFiniteInput("response"));
    }
    if let Some(s) = start {
        if s.len() != p {
            return Err(SolverError::DimensionMismatch(format!(
                "start has length {} but X has {p} columns",
                s.len()
            )));
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(SolverError::NonFiniteInput("starting point"));
        }
    }
    Ok(())
}

/// Largest eigenvalue of `X'X` by power iteration from a fixed start.
pub fn op_norm_sq(x: &DMatrix<f64>) -> f64 {
    let p = x.ncols();
    let mut v = DVector::from_fn(p, |j, _| 1.0 + 0.01 * (j % 7) as f64);
    v /= v.norm();
    let mut est = 0.0;
    for _ in 0..100 {
        let w = x.tr_mul(&(x * &v));
        let nw = w.norm();
        if nw == 0.0 {
            return 0.0;
        }
        let prev = est;
        est = nw;
        v = w / nw;
        if (est - prev).abs() <= 1e-6 * est {
            break;
        }
    }
    est
}

pub fn fit<L: Loss + ?Sized>(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    loss: &L,
    penalty: &Penalty,
    opts: &SolverOptions,
) -> Result<FitResult, SolverError> {
    check_inputs(x, y, None)?;
    let start = DVector::zeros(x.ncols());
    Solver::new(x, y, loss, penalty, opts)?.run(start, false)
}

/// As [`fit`], started from `start`. The certified output does not depend on
/// the starting point beyond the KKT tolerance.
pub fn fit_from<L: Loss + ?Sized>(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    loss: &L,
    penalty: &Penalty,
    opts: &SolverOptions,
    start: &DVector<f64>,
) -> Result<FitResult, SolverError> {
    check_inputs(x, y, Some(start))?;
    Solver::new(x, y, loss, penalty, opts)?.run(start.clone(), true)
}

/// Assembles a [`FitResult`] from a coefficient vector.
pub fn evaluate_at<L: Loss + ?Sized>(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    loss: &L,
    penalty: &Penalty,
    beta: DVector<f64>,
) -> FitResult {
    let residuals = y - x * &beta;
    let psi = residuals.map(|v| loss.psi(v));
    let psi_prime = residuals.map(|v| loss.psi_prime(v));
    let u = x.tr_mul(&psi) / x.nrows() as f64;
    let kkt = penalty.kkt_distance(&beta, &u);
    let obj = smooth_value(loss, &residuals) + penalty.value(&beta);
    let n_hat = loss
        .huber_scale()
        .map(|_| psi_prime.iter().filter(|&&d| d == 1.0).count());
    let psi_is_zero = psi.iter().all(|&v| v == 0.0);
    FitResult {
        active_set: active_set(&beta),
        beta_hat: beta,
        residuals,
        psi,
        psi_prime,
        n_hat,
        kkt_residual: kkt,
        objective: obj,
        objective_trace: vec![obj],
        iterations: 0,
        converged: false,
        psi_is_zero,
    }
}

struct Solver<'a, L: ?Sized> {
    x: &'a DMatrix<f64>,
    y: &'a DVector<f64>,
    loss: &'a L,
    penalty: &'a Penalty,
    opts: &'a SolverOptions,
    n: f64,
}

// Iterate together with the quantities derived from it.
#[derive(Clone)]
struct Point {
    b: DVector<f64>,
    xb: DVector<f64>,
    smooth: f64,
    /// X' psi / n, i.e. minus the smooth gradient
    score: DVector<f64>,
}

impl<'a, L: Loss + ?Sized> Solver<'a, L> {
    fn new(
        x: &'a DMatrix<f64>,
        y: &'a DVector<f64>,
        loss: &'a L,
        penalty: &'a Penalty,
        opts: &'a SolverOptions,
    ) -> Result<Self, SolverError> {
        opts.validate()?;
        if !penalty.lambda().is_finite() || !(penalty.tau() >= 0.0) {
            return Err(SolverError::InvalidOptions("invalid penalty".into()));
        }
        Ok(Solver {
            x,
            y,
            loss,
            penalty,
            opts,
            n: x.nrows() as f64,
        })
    }

    fn point(&self, b: DVector<f64>, xb: DVector<f64>) -> Point {
        let r = self.y - &xb;
        let smooth = smooth_value(self.loss, &r);
        let psi = r.map(|v| self.loss.psi(v));
        let score = self.x.tr_mul(&psi) / self.n;
        Point { b, xb, smooth, score }
    }

    fn point_from(&self, b: DVector<f64>) -> Point {
        let xb = self.x * &b;
        self.point(b, xb)
    }

    fn total(&self, p: &Point) -> f64 {
        p.smooth + self.penalty.value(&p.b)
    }

    fn kkt(&self, p: &Point) -> f64 {
        self.penalty.kkt_distance(&p.b, &p.score)
    }

    fn initial_step(&self) -> f64 {
        if let Some(s) = self.opts.initial_step {
            return s;
        }
        let lip = self.loss.lipschitz() * op_norm_sq(self.x) * 1.01 / self.n;
        if lip > 0.0 {
            1.0 / lip
        } else {
            1.0
        }
    }

    fn finish(&self, cur: Point, trace: Vec<f64>, iterations: usize, converged: bool) -> FitResult {
        let mut res = evaluate_at(self.x, self.y, self.loss, self.penalty, cur.b);
        res.objective_trace = trace;
        res.iterations = iterations;
        res.converged = converged;
        if res.psi_is_zero {
            log::warn!("psi vanishes identically at the fitted coefficients");
        }
        res
    }

    fn run(&self, start: DVector<f64>, warm: bool) -> Result<FitResult, SolverError> {
        let tol = self.opts.kkt_tol;
        let mut cur = self.point_from(start);
        let mut f_cur = self.total(&cur);
        let mut trace = vec![f_cur];
        if self.kkt(&cur) <= tol {
            return Ok(self.finish(cur, trace, 0, true));
        }
        if self.opts.polish && warm {
            if let Some(c) = self.polish(&cur.b) {
                let f_c = self.total(&c);
                if self.kkt(&c) <= tol && f_c <= f_cur + 1e-12 * f_cur.abs().max(1.0) {
                    trace.push(f_c);
                    return Ok(self.finish(c, trace, 0, true));
                }
                if f_c < f_cur {
                    cur = c;
                    f_cur = f_c;
                    trace.push(f_cur);
                }
            }
        }

        let mut step = self.initial_step();
        let mut prev: Point;
        let mut ext = cur.clone();
        let mut t = 1.0_f64;
        let mut has_momentum = false;
        let mut support = zero_pattern(&cur.b);
        let mut last_change = 0usize;
        let mut last_polish = 0usize;

        for iter in 1..=self.opts.max_iter {
            let (cand, f_smooth_cand) = self.backtrack(&ext, &mut step);
            let f_cand = f_smooth_cand + self.penalty.value(&cand.b);
            if has_momentum && f_cand > f_cur {
                // restart from the current iterate without momentum
                t = 1.0;
                has_momentum = false;
                ext = cur.clone();
                continue;
            }
            let cand = self.point(cand.b, cand.xb);
            prev = std::mem::replace(&mut cur, cand);
            f_cur = f_cand;
            trace.push(f_cur);

            if self.kkt(&cur) <= tol {
                return Ok(self.finish(cur, trace, iter, true));
            }

            let pattern = zero_pattern(&cur.b);
            if pattern != support {
                support = pattern;
                last_change = iter;
            }
            if self.opts.polish && iter - last_change >= 5 && iter - last_polish >= 10 {
                last_polish = iter;
                if let Some(c) = self.polish(&cur.b) {
                    let f_c = self.total(&c);
                    if f_c <= f_cur + 1e-12 * f_cur.abs().max(1.0) {
                        let done = self.kkt(&c) <= tol;
                        cur = c;
                        f_cur = f_c;
                        trace.push(f_cur);
                        if done {
                            return Ok(self.finish(cur, trace, iter, true));
                        }
                        t = 1.0;
                        has_momentum = false;
                        ext = cur.clone();
                        continue;
                    }
                }
            }

            if self.opts.accelerate {
                let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
                let beta = (t - 1.0) / t_next;
                t = t_next;
                has_momentum = beta > 0.0;
                if has_momentum {
                    let b = &cur.b + (&cur.b - &prev.b) * beta;
                    let xb = &cur.xb + (&cur.xb - &prev.xb) * beta;
                    ext = self.point(b, xb);
                } else {
                    ext = cur.clone();
                }
            } else {
                ext = cur.clone();
            }
        }
        let best = self.finish(cur, trace, self.opts.max_iter, false);
        Err(SolverError::MaxIterExceeded {
            best: Box::new(best),
        })
    }

    // Proximal step from `ext`, shrinking `step` until the quadratic upper
    // bound holds. Returns the candidate (score not yet computed) and its
    // smooth value.
    fn backtrack(&self, ext: &Point, step: &mut f64) -> (Point, f64) {
        loop {
            let v = &ext.b + &ext.score * *step;
            let b = self.penalty.prox(&v, *step);
            let xb = self.x * &b;
            let r = self.y - &xb;
            let smooth = smooth_value(self.loss, &r);
            let d = &b - &ext.b;
            // smooth gradient at ext is -score
            let bound = ext.smooth - ext.score.dot(&d) + d.norm_squared() / (2.0 * *step);
            if smooth <= bound + 1e-13 * ext.smooth.abs().max(1.0) || *step < 1e-300 {
                return (
                    Point {
                        b,
                        xb,
                        smooth,
                        score: DVector::zeros(0),
                    },
                    smooth,
                );
            }
            *step *= self.opts.backtrack_factor;
        }
    }

    /// Newton iterations on the objective restricted to the support of `b`
    /// with its signs frozen. Returns `None` when the support or signs turn
    /// out to be inconsistent or the restricted Hessian is singular.
    fn polish(&self, b: &DVector<f64>) -> Option<Point> {
        let p = b.len();
        let lambda = self.penalty.lambda();
        let tau = self.penalty.tau();
        let support: Vec<usize> = if lambda > 0.0 {
            (0..p).filter(|&j| b[j] != 0.0).collect()
        } else {
            (0..p).collect()
        };
        let k = support.len();
        if k == 0 {
            return None;
        }
        let signs: Vec<f64> = support.iter().map(|&j| b[j].signum()).collect();
        let xs = self.x.select_columns(&support);
        let mut bs = DVector::from_iterator(k, support.iter().map(|&j| b[j]));
        let huber = self.loss.huber_scale().is_some();
        let mut zones: Option<Vec<i8>> = None;
        for _ in 0..30 {
            let r = self.y - &xs * &bs;
            let cur_zones: Vec<i8> = r.iter().map(|&v| zone(self.loss, v)).collect();
            if huber && zones.as_ref() == Some(&cur_zones) {
                break;
            }
            let psi = r.map(|v| self.loss.psi(v));
            let w = r.map(|v| self.loss.psi_prime(v));
            let mut grad = -xs.tr_mul(&psi) / self.n + &bs * tau;
            if lambda > 0.0 {
                for (g, s) in grad.iter_mut().zip(signs.iter()) {
                    *g += lambda * s;
                }
            }
            let rows: Vec<usize> = (0..r.len()).filter(|&i| w[i] > 0.0).collect();
            let mut xw = xs.select_rows(&rows);
            for (ri, &i) in rows.iter().enumerate() {
                let s = w[i].sqrt();
                xw.row_mut(ri).scale_mut(s);
            }
            let mut h = xw.tr_mul(&xw) / self.n;
            for d in 0..k {
                h[(d, d)] += tau;
            }
            let chol = h.cholesky()?;
            let delta = chol.solve(&grad);
            if !delta.iter().all(|v| v.is_finite()) {
                return None;
            }
            bs -= &delta;
            if lambda > 0.0
                && bs
                    .iter()
                    .zip(signs.iter())
                    .any(|(v, s)| v.signum() != *s || *v == 0.0)
            {
                return None;
            }
            zones = Some(cur_zones);
            let scale = bs.amax().max(1.0);
            if !huber
                && (delta.amax() <= 1e-15 * scale || grad.amax() <= 1e-3 * self.opts.kkt_tol)
            {
                break;
            }
        }
        let mut full = DVector::zeros(p);
        for (v, &j) in bs.iter().zip(support.iter()) {
            full[j] = *v;
        }
        Some(self.point_from(full))
    }
}

// Piecewise-linear region of psi containing v, for the Huber loss.
fn zone<L: Loss + ?Sized>(loss: &L, v: f64) -> i8 {
    match loss.huber_scale() {
        Some(s) if v > s => 1,
        Some(s) if v < -s => -1,
        _ => 0,
    }
}

fn zero_pattern(b: &DVector<f64>) -> Vec<i8> {
    b.iter()
        .map(|&v| {
            if v > 0.0 {
                1
            } else if v < 0.0 {
                -1
            } else {
                0
            }
        })
        .collect()
}

/// Perturbation of the noise and the design used by [`stability_check`].
#[derive(Debug, Clone)]
pub struct Perturbation {
    pub d_eps: DVector<f64>,
    pub d_x: DMatrix<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct StabilityReport {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
    #[serde(skip)]
    pub base: FitResult,
    #[serde(skip)]
    pub perturbed: FitResult,
}

/// Evaluates both sides of the joint Lipschitz inequality
///
/// `n tau |h - h~|^2 + |psi - psi~|^2 / L
///     <= (h - h~)'(X - X~)' psi + (eps - eps~ + X~ h - X h)'(psi - psi~)`
///
/// where `h = beta_hat - beta` for the problem `(X, y = X beta + eps)` and
/// `h~` for the perturbed problem `(X~, X~ beta + eps~)`.
#[allow(clippy::too_many_arguments)]
pub fn stability_check<L: Loss + ?Sized>(
    x: &DMatrix<f64>,
    eps: &DVector<f64>,
    beta: &DVector<f64>,
    loss: &L,
    penalty: &Penalty,
    perturbation: &Perturbation,
    opts: &SolverOptions,
    tol: f64,
) -> Result<StabilityReport, SolverError> {
    if perturbation.d_eps.len() != eps.len() || perturbation.d_x.shape() != x.shape() {
        return Err(SolverError::DimensionMismatch(
            "perturbation shape does not match the problem".into(),
        ));
    }
    let y = x * beta + eps;
    let base = fit(x, &y, loss, penalty, opts)?;
    let x_t = x + &perturbation.d_x;
    let eps_t = eps + &perturbation.d_eps;
    let y_t = &x_t * beta + &eps_t;
    let pert = fit_from(&x_t, &y_t, loss, penalty, opts, &base.beta_hat)?;

    let n = x.nrows() as f64;
    let h = &base.beta_hat - beta;
    let h_t = &pert.beta_hat - beta;
    let dh = &h - &h_t;
    let dpsi = &base.psi - &pert.psi;
    let lhs = n * penalty.tau() * dh.norm_squared() + dpsi.norm_squared() / loss.lipschitz();
    let term1 = dh.dot(&(x - &x_t).tr_mul(&base.psi));
    let term2 = (eps - &eps_t + &x_t * &h - x * &h).dot(&dpsi);
    let rhs = term1 + term2;
    Ok(StabilityReport {
        lhs,
        rhs,
        holds: lhs <= rhs + tol,
        base,
        perturbed: pert,
    })
}

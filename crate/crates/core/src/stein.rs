//! Monte-Carlo verification of Stein-type identities for `z` uniform on the
//! sphere of radius `R` in `R^n`:
//!
//! * first order: `E[f(z)'z] = R^2 / (n-1) E[tr(A)]`
//! * Poincare: `E|f - Ef|^2 <= R^2 / (n-2) E|A|_F^2`
//! * second order:
//!   `E[(n f'z / R^2 - tr A)^2] = n/R^2 E|f|^2 + n/(n-2) E tr(A^2) - 2/(n-2) E (tr A)^2`,
//!   bounded above by `n/R^2 E|f|^2 + (1 - 2/n)^{-1} E|A|_F^2`
//!
//! where `A = (grad f)' P` is the Jacobian of `f` composed with the tangent
//! projection `P = I - z z' / |z|^2`. For normalized fields `f = g / |g|` two
//! further second-moment bounds on `xi_f = f'z - R^2 tr(A) / n` are checked.
//!
//! Fields are evaluated through their radial extension `f(R x / |x|)`, and
//! Jacobians are taken by central differences unless an analytic Jacobian is
//! attached. All checks are seeded and compare estimates in units of the
//! Monte-Carlo standard error.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::losses::RobustLoss;
use crate::penalties::Penalty;
use crate::solver::{self, SolverOptions};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SteinError {
    #[error("dimension must be at least 3, got {0}")]
    DimensionTooSmall(usize),
    #[error("radius must be finite and positive, got {0}")]
    InvalidRadius(f64),
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("field evaluation is not finite at a sampled point")]
    NonFiniteEvaluation,
    #[error("field is not invariant under radial scaling (deviation {0:.3e})")]
    NotRadial(f64),
    #[error("field setup failed: {0}")]
    Setup(String),
}

/// A stateful evaluator of a field. Evaluators are created per sample batch
/// so that they may carry warm-start state.
pub type Evaluator = Box<dyn FnMut(&DVector<f64>) -> DVector<f64> + Send>;
type EvaluatorFactory = dyn Fn() -> Evaluator + Send + Sync;
type JacobianFn = dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync;

/// A vector field `f: S^{n-1}(R) -> R^n`.
#[derive(Clone)]
pub struct SphereField {
    n: usize,
    radius: f64,
    name: String,
    factory: Arc<EvaluatorFactory>,
    jacobian: Option<Arc<JacobianFn>>,
}

impl std::fmt::Debug for SphereField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SphereField")
            .field("name", &self.name)
            .field("n", &self.n)
            .field("radius", &self.radius)
            .field("analytic_jacobian", &self.jacobian.is_some())
            .finish()
    }
}

fn check_geometry(n: usize, radius: f64) -> Result<(), SteinError> {
    if n < 3 {
        return Err(SteinError::DimensionTooSmall(n));
    }
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(SteinError::InvalidRadius(radius));
    }
    Ok(())
}

impl SphereField {
    /// Field from a stateless function of the point on the sphere.
    pub fn new<F>(n: usize, radius: f64, name: &str, f: F) -> Result<Self, SteinError>
    where
        F: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    {
        check_geometry(n, radius)?;
        let f = Arc::new(f);
        Ok(SphereField {
            n,
            radius,
            name: name.to_string(),
            factory: Arc::new(move || {
                let f = Arc::clone(&f);
                Box::new(move |z: &DVector<f64>| f(z)) as Evaluator
            }),
            jacobian: None,
        })
    }

    /// Field whose evaluators keep state between calls (e.g. warm starts).
    pub fn from_factory<F>(n: usize, radius: f64, name: &str, factory: F) -> Result<Self, SteinError>
    where
        F: Fn() -> Evaluator + Send + Sync + 'static,
    {
        check_geometry(n, radius)?;
        Ok(SphereField {
            n,
            radius,
            name: name.to_string(),
            factory: Arc::new(factory),
            jacobian: None,
        })
    }

    /// Attaches the ambient Jacobian `d f_i / d z_k` (rows are outputs).
    pub fn with_jacobian<J>(mut self, jac: J) -> Self
    where
        J: Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    {
        self.jacobian = Some(Arc::new(jac));
        self
    }

    pub fn identity(n: usize, radius: f64) -> Result<Self, SteinError> {
        Ok(Self::new(n, radius, "identity", |z| z.clone())?
            .with_jacobian(move |_| DMatrix::identity(n, n)))
    }

    pub fn linear(a: DMatrix<f64>, radius: f64) -> Result<Self, SteinError> {
        if !a.is_square() {
            return Err(SteinError::Setup("linear field needs a square matrix".into()));
        }
        let n = a.nrows();
        let a = Arc::new(a);
        let a2 = Arc::clone(&a);
        Ok(Self::new(n, radius, "linear", move |z| &*a * z)?.with_jacobian(move |_| (*a2).clone()))
    }

    pub fn constant(c: DVector<f64>, radius: f64) -> Result<Self, SteinError> {
        let n = c.len();
        Ok(Self::new(n, radius, "constant", move |_| c.clone())?
            .with_jacobian(move |_| DMatrix::zeros(n, n)))
    }

    /// Random linear field `z -> A z` with iid `N(0, 1/n)` entries.
    pub fn random_linear(n: usize, radius: f64, seed: u64) -> Result<Self, SteinError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = 1.0 / (n as f64).sqrt();
        let a = DMatrix::from_fn(n, n, |_, _| s * rng.sample::<f64, _>(StandardNormal));
        Self::linear(a, radius)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn evaluator(&self) -> Evaluator {
        (self.factory)()
    }

    /// Radial extension `f(R x / |x|)` evaluated with `eval`.
    fn radial(&self, eval: &mut Evaluator, x: &DVector<f64>) -> DVector<f64> {
        let on_sphere = x * (self.radius / x.norm());
        eval(&on_sphere)
    }

    /// Evaluates the radial extension at an arbitrary nonzero point.
    pub fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut e = self.evaluator();
        self.radial(&mut e, x)
    }

    pub fn analytic_jacobian(&self, z: &DVector<f64>) -> Option<DMatrix<f64>> {
        self.jacobian.as_ref().map(|j| j(z))
    }
}

/// `R zeta / |zeta|` with `zeta` standard normal.
pub fn sample_sphere<R: Rng + ?Sized>(n: usize, radius: f64, rng: &mut R) -> DVector<f64> {
    loop {
        let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let nz = z.norm();
        if nz > 0.0 {
            return z * (radius / nz);
        }
    }
}

/// `P_z = I - z z' / |z|^2`.
pub fn tangent_projection(z: &DVector<f64>) -> DMatrix<f64> {
    let n = z.len();
    DMatrix::identity(n, n) - z * z.transpose() / z.norm_squared()
}

/// Default central-difference step `1e-5 R`.
pub fn default_step(radius: f64) -> f64 {
    1e-5 * radius
}

/// `(grad f(z))' P_z` by central differences of the radial extension.
pub fn tangential_jacobian(field: &SphereField, z: &DVector<f64>, h: f64) -> Result<DMatrix<f64>, SteinError> {
    let mut e = field.evaluator();
    fd_tangential_jacobian(field, &mut e, z, h)
}

fn fd_tangential_jacobian(
    field: &SphereField,
    eval: &mut Evaluator,
    z: &DVector<f64>,
    h: f64,
) -> Result<DMatrix<f64>, SteinError> {
    let n = field.n;
    let mut jac = DMatrix::zeros(n, n);
    let mut zp = z.clone();
    for k in 0..n {
        zp[k] = z[k] + h;
        let plus = field.radial(eval, &zp);
        zp[k] = z[k] - h;
        let minus = field.radial(eval, &zp);
        zp[k] = z[k];
        let col = (plus - minus) / (2.0 * h);
        if col.iter().any(|v| !v.is_finite()) {
            return Err(SteinError::NonFiniteEvaluation);
        }
        jac.set_column(k, &col);
    }
    Ok(jac * tangent_projection(z))
}

/// Checks `f(c x) == f(x)` for a few scalings `c`.
pub fn check_radial_invariance(field: &SphereField, z: &DVector<f64>, tol: f64) -> Result<(), SteinError> {
    let mut e = field.evaluator();
    let base = field.radial(&mut e, z);
    for c in [0.5, 2.0, 3.7] {
        let other = field.radial(&mut e, &(z * c));
        let dev = (&other - &base).amax() / base.amax().max(1.0);
        if !(dev <= tol) {
            return Err(SteinError::NotRadial(dev));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Identity {
    FirstOrder,
    Poincare,
    SecondOrder,
    PropBounds,
}

impl Identity {
    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "first" | "first_order" => Some(Identity::FirstOrder),
            "poincare" => Some(Identity::Poincare),
            "second" | "second_order" => Some(Identity::SecondOrder),
            "bounds" | "prop_bounds" => Some(Identity::PropBounds),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    Equality,
    UpperBound,
}

/// One Monte-Carlo comparison `lhs (=|<=) rhs`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub name: String,
    pub relation: Relation,
    pub lhs_estimate: f64,
    pub rhs_estimate: f64,
    pub mc_se_lhs: f64,
    pub mc_se_rhs: f64,
    /// `(lhs - rhs) / sqrt(se_lhs^2 + se_rhs^2)`
    pub z_score: f64,
    pub passed: bool,
}

/// Tolerance in combined standard errors.
pub const SE_MULTIPLIER: f64 = 3.0;
/// Allowance for finite-difference and summation round-off, relevant only
/// when both sides have (near) zero Monte-Carlo variance.
pub const ROUNDOFF_RTOL: f64 = 1e-7;
pub const ROUNDOFF_ATOL: f64 = 1e-12;

impl Comparison {
    fn new(name: &str, relation: Relation, lhs: &Moment, rhs: &Moment) -> Self {
        let se = (lhs.se * lhs.se + rhs.se * rhs.se).sqrt();
        let gap = lhs.mean - rhs.mean;
        let allowance =
            SE_MULTIPLIER * se + ROUNDOFF_RTOL * (lhs.mean.abs() + rhs.mean.abs()) + ROUNDOFF_ATOL;
        let passed = match relation {
            Relation::Equality => gap.abs() <= allowance,
            Relation::UpperBound => gap <= allowance,
        };
        Comparison {
            name: name.to_string(),
            relation,
            lhs_estimate: lhs.mean,
            rhs_estimate: rhs.mean,
            mc_se_lhs: lhs.se,
            mc_se_rhs: rhs.se,
            z_score: if se > 0.0 { gap / se } else { 0.0 },
            passed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SteinReport {
    pub identity: Identity,
    pub field: String,
    pub n: usize,
    pub radius: f64,
    pub samples: usize,
    pub seed: u64,
    /// Samples discarded because `|f(z)|` vanished (normalized bounds only).
    pub rejected: usize,
    pub checks: Vec<Comparison>,
}

impl SteinReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

#[derive(Debug, Clone, Copy)]
struct Moment {
    mean: f64,
    se: f64,
}

fn moment<I: IntoIterator<Item = f64>>(it: I) -> Moment {
    let v: Vec<f64> = it.into_iter().collect();
    let m = v.len() as f64;
    let mean = pairwise_sum(&v) / m;
    let dev: Vec<f64> = v.iter().map(|x| (x - mean).powi(2)).collect();
    let var = if v.len() > 1 { pairwise_sum(&dev) / (m - 1.0) } else { 0.0 };
    Moment {
        mean,
        se: (var / m).sqrt(),
    }
}

fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 64 {
        v.iter().sum()
    } else {
        let (a, b) = v.split_at(v.len() / 2);
        pairwise_sum(a) + pairwise_sum(b)
    }
}

// Per-sample quantities; everything a check needs.
struct SampleStats {
    z: DVector<f64>,
    f: DVector<f64>,
    tr: f64,
    fro2: f64,
    tr_sq: f64,
    normalized: Option<NormalizedStats>,
}

struct NormalizedStats {
    f: DVector<f64>,
    tr: f64,
    fro2: f64,
}

const BATCH: usize = 1000;
const NORM_GUARD: f64 = 1e-12;

fn collect(
    field: &SphereField,
    samples: usize,
    seed: u64,
    normalized: bool,
) -> Result<Vec<SampleStats>, SteinError> {
    if samples < 2 {
        return Err(SteinError::TooFewSamples(samples));
    }
    let n = field.n;
    let r = field.radius;
    let h = default_step(r);
    let batches = samples.div_ceil(BATCH);
    let out: Vec<Result<Vec<SampleStats>, SteinError>> = (0..batches)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b as u64);
            let mut eval = field.evaluator();
            let count = BATCH.min(samples - b * BATCH);
            let mut stats = Vec::with_capacity(count);
            for _ in 0..count {
                let z = sample_sphere(n, r, &mut rng);
                let f = field.radial(&mut eval, &z);
                if f.iter().any(|v| !v.is_finite()) {
                    return Err(SteinError::NonFiniteEvaluation);
                }
                let a = match field.analytic_jacobian(&z) {
                    Some(j) => j * tangent_projection(&z),
                    None => fd_tangential_jacobian(field, &mut eval, &z, h)?,
                };
                let tr = a.trace();
                let fro2 = a.norm_squared();
                let tr_sq = (&a * &a).trace();
                let normalized = if normalized {
                    let nf = f.norm();
                    if nf < NORM_GUARD {
                        None
                    } else {
                        // d(f/|f|) = (I - u u') (df) / |f|
                        let u = &f / nf;
                        let an = (&a - &u * (u.transpose() * &a)) / nf;
                        Some(NormalizedStats {
                            f: u,
                            tr: an.trace(),
                            fro2: an.norm_squared(),
                        })
                    }
                } else {
                    None
                };
                stats.push(SampleStats {
                    z,
                    f,
                    tr,
                    fro2,
                    tr_sq,
                    normalized,
                });
            }
            Ok(stats)
        })
        .collect();
    let mut all = Vec::with_capacity(samples);
    for batch in out {
        all.extend(batch?);
    }
    Ok(all)
}

fn mean_vector<'a, I: Iterator<Item = &'a DVector<f64>>>(n: usize, it: I) -> DVector<f64> {
    let mut sum = DVector::zeros(n);
    let mut count = 0usize;
    for v in it {
        sum += v;
        count += 1;
    }
    sum / count.max(1) as f64
}

fn first_order_checks(s: &[SampleStats], n: usize, r: f64) -> Vec<Comparison> {
    let k = r * r / (n as f64 - 1.0);
    let lhs = moment(s.iter().map(|x| x.f.dot(&x.z)));
    let rhs = moment(s.iter().map(|x| k * x.tr));
    vec![Comparison::new("E[f'z] = R^2/(n-1) E[tr A]", Relation::Equality, &lhs, &rhs)]
}

fn poincare_checks(s: &[SampleStats], n: usize, r: f64) -> Vec<Comparison> {
    let m = s.len() as f64;
    let mean = mean_vector(n, s.iter().map(|x| &x.f));
    let lhs = moment(s.iter().map(|x| (&x.f - &mean).norm_squared() * m / (m - 1.0)));
    let k = r * r / (n as f64 - 2.0);
    let rhs = moment(s.iter().map(|x| k * x.fro2));
    vec![Comparison::new(
        "E|f - Ef|^2 <= R^2/(n-2) E|A|_F^2",
        Relation::UpperBound,
        &lhs,
        &rhs,
    )]
}

fn second_order_checks(s: &[SampleStats], n: usize, r: f64) -> Vec<Comparison> {
    let nf = n as f64;
    let r2 = r * r;
    let lhs = moment(s.iter().map(|x| (nf / r2 * x.f.dot(&x.z) - x.tr).powi(2)));
    let rhs_eq = moment(s.iter().map(|x| {
        nf / r2 * x.f.norm_squared() + nf / (nf - 2.0) * x.tr_sq - 2.0 / (nf - 2.0) * x.tr * x.tr
    }));
    let rhs_ineq = moment(
        s.iter()
            .map(|x| nf / r2 * x.f.norm_squared() + x.fro2 / (1.0 - 2.0 / nf)),
    );
    vec![
        Comparison::new("second-order equality", Relation::Equality, &lhs, &rhs_eq),
        Comparison::new("second-order inequality", Relation::UpperBound, &lhs, &rhs_ineq),
    ]
}

fn bounds_checks(s: &[SampleStats], n: usize, r: f64) -> Vec<Comparison> {
    let nf = n as f64;
    let r2 = r * r;
    let kept: Vec<(&DVector<f64>, &NormalizedStats)> = s
        .iter()
        .filter_map(|x| x.normalized.as_ref().map(|ns| (&x.z, ns)))
        .collect();
    let mean_f = mean_vector(n, kept.iter().map(|(_, ns)| &ns.f));
    let lhs1 = moment(kept.iter().map(|(z, ns)| {
        let xi = ns.f.dot(z) - r2 / nf * ns.tr;
        (xi - mean_f.dot(z)).powi(2)
    }));
    let rhs1 = moment(
        kept.iter()
            .map(|(_, ns)| 2.0 * r2 * r2 / (nf * nf - 2.0 * nf) * ns.fro2),
    );
    let mean_norm = mean_f.norm();
    let abs_dev = moment(kept.iter().map(|(_, ns)| (ns.f.norm() - mean_norm).abs()));
    // (E|.|)^2 with a delta-method standard error
    let lhs2 = Moment {
        mean: abs_dev.mean * abs_dev.mean,
        se: 2.0 * abs_dev.mean.abs() * abs_dev.se,
    };
    let rhs2 = moment(kept.iter().map(|(_, ns)| r2 / (nf - 2.0) * ns.fro2));
    vec![
        Comparison::new(
            "E[(xi_f - Ef'z)^2] <= 2R^4/(n^2-2n) E|A|_F^2",
            Relation::UpperBound,
            &lhs1,
            &rhs1,
        ),
        Comparison::new(
            "(E||f| - |Ef||)^2 <= R^2/(n-2) E|A|_F^2",
            Relation::UpperBound,
            &lhs2,
            &rhs2,
        ),
    ]
}

fn report(
    identity: Identity,
    field: &SphereField,
    samples: usize,
    seed: u64,
    stats: &[SampleStats],
) -> SteinReport {
    let (n, r) = (field.n, field.radius);
    let checks = match identity {
        Identity::FirstOrder => first_order_checks(stats, n, r),
        Identity::Poincare => poincare_checks(stats, n, r),
        Identity::SecondOrder => second_order_checks(stats, n, r),
        Identity::PropBounds => bounds_checks(stats, n, r),
    };
    let rejected = if identity == Identity::PropBounds {
        stats.iter().filter(|s| s.normalized.is_none()).count()
    } else {
        0
    };
    SteinReport {
        identity,
        field: field.name.clone(),
        n,
        radius: r,
        samples,
        seed,
        rejected,
        checks,
    }
}

fn precheck(field: &SphereField, seed: u64) -> Result<(), SteinError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let z = sample_sphere(field.n, field.radius, &mut rng);
    check_radial_invariance(field, &z, 1e-8)
}

/// Runs several identities on one shared set of samples.
pub fn check_identities(
    field: &SphereField,
    identities: &[Identity],
    samples: usize,
    seed: u64,
) -> Result<Vec<SteinReport>, SteinError> {
    precheck(field, seed)?;
    let normalized = identities.contains(&Identity::PropBounds);
    let stats = collect(field, samples, seed, normalized)?;
    Ok(identities
        .iter()
        .map(|&id| report(id, field, samples, seed, &stats))
        .collect())
}

fn single(field: &SphereField, id: Identity, samples: usize, seed: u64) -> Result<SteinReport, SteinError> {
    Ok(check_identities(field, &[id], samples, seed)?.remove(0))
}

pub fn check_first_order(field: &SphereField, samples: usize, seed: u64) -> Result<SteinReport, SteinError> {
    single(field, Identity::FirstOrder, samples, seed)
}

pub fn check_poincare(field: &SphereField, samples: usize, seed: u64) -> Result<SteinReport, SteinError> {
    single(field, Identity::Poincare, samples, seed)
}

pub fn check_second_order(field: &SphereField, samples: usize, seed: u64) -> Result<SteinReport, SteinError> {
    single(field, Identity::SecondOrder, samples, seed)
}

/// Bounds for the normalized field `raw / |raw|`.
pub fn check_normalized_bounds(raw: &SphereField, samples: usize, seed: u64) -> Result<SteinReport, SteinError> {
    single(raw, Identity::PropBounds, samples, seed)
}

/// The score field of a penalized Huber fit seen as a function of one design
/// column: `z -> psi(y(z) - X(z) beta_hat(z))` where column `j` of `X(z)` is
/// `w_j + (sqrt(n) / R) z`, `y(z) = X(z) beta + eps`, and the other columns,
/// `beta` and `eps` stay frozen.
#[derive(Debug, Clone)]
pub struct PsiPlugin {
    pub w: DMatrix<f64>,
    pub beta: DVector<f64>,
    pub eps: DVector<f64>,
    pub j: usize,
    pub loss: RobustLoss,
    pub penalty: Penalty,
    pub opts: SolverOptions,
}

impl PsiPlugin {
    /// Random instance: Gaussian design with column `j = 0` removed (so the
    /// sphere variable plays the role of that column), three unit
    /// coefficients, Student-t(2) noise, Huber(1) with Elastic-Net(0.05, 0.1).
    pub fn random(n: usize, p: usize, seed: u64) -> Result<Self, SteinError> {
        if p < 1 {
            return Err(SteinError::Setup("need p >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
        w.column_mut(0).fill(0.0);
        let beta = DVector::from_fn(p, |k, _| if k < 3 { 1.0 } else { 0.0 });
        let eps = DVector::from_fn(n, |_, _| {
            let u: f64 = rng.random::<f64>().clamp(1e-300, 1.0 - 1e-16);
            (2.0 * u - 1.0) / (2.0 * u * (1.0 - u)).sqrt()
        });
        Ok(PsiPlugin {
            w,
            beta,
            eps,
            j: 0,
            loss: RobustLoss::huber(1.0).map_err(|e| SteinError::Setup(e.to_string()))?,
            penalty: Penalty::elastic_net(0.05, 0.1).map_err(|e| SteinError::Setup(e.to_string()))?,
            opts: SolverOptions::default(),
        })
    }

    pub fn into_field(self, radius: f64) -> Result<SphereField, SteinError> {
        let n = self.w.nrows();
        let scale = (n as f64).sqrt() / radius;
        let cfg = Arc::new(self);
        SphereField::from_factory(n, radius, "psi-plugin", move || {
            let cfg = Arc::clone(&cfg);
            let mut warm = DVector::zeros(cfg.w.ncols());
            Box::new(move |z: &DVector<f64>| {
                let mut x = cfg.w.clone();
                let col = cfg.w.column(cfg.j) + z * scale;
                x.set_column(cfg.j, &col);
                let y = &x * &cfg.beta + &cfg.eps;
                match solver::fit_from(&x, &y, &cfg.loss, &cfg.penalty, &cfg.opts, &warm) {
                    Ok(f) => {
                        warm = f.beta_hat.clone();
                        f.psi
                    }
                    Err(_) => DVector::from_element(z.len(), f64::NAN),
                }
            }) as Evaluator
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn samples_lie_on_the_sphere() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let z = sample_sphere(7, 2.5, &mut rng);
            assert!((z.norm() - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn sample_moments() {
        let (n, r, m) = (5, 2.0, 20_000);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let zs: Vec<DVector<f64>> = (0..m).map(|_| sample_sphere(n, r, &mut rng)).collect();
        for k in 0..n {
            let first = moment(zs.iter().map(|z| z[k]));
            assert!(first.mean.abs() <= 3.0 * first.se);
        }
        // E[z_1^2] = R^2 / n
        let sq = moment(zs.iter().map(|z| z[0] * z[0]));
        assert!((sq.mean - r * r / n as f64).abs() <= 3.0 * sq.se);
    }

    #[test]
    fn jacobian_of_identity_is_projection() {
        let f = SphereField::new(6, 1.5, "id", |z| z.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = sample_sphere(6, 1.5, &mut rng);
        let a = tangential_jacobian(&f, &z, 1e-5).unwrap();
        assert!((&a - tangent_projection(&z)).amax() < 1e-8);
        assert!((a.trace() - 5.0).abs() < 1e-8);
    }

    #[test]
    fn jacobian_of_constant_vanishes() {
        let c = DVector::from_column_slice(&[1.0, -2.0, 0.5, 3.0]);
        let f = SphereField::new(4, 1.0, "c", move |_| c.clone()).unwrap();
        let z = DVector::from_column_slice(&[0.5, 0.5, 0.5, 0.5]);
        assert_eq!(tangential_jacobian(&f, &z, 1e-5).unwrap().amax(), 0.0);
    }

    #[test]
    fn linear_jacobian_matches_analytic() {
        let field = SphereField::random_linear(8, 1.0, 4).unwrap();
        let fd_only = {
            let g = field.clone();
            SphereField::new(8, 1.0, "linear-fd", move |z| g.eval(z)).unwrap()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let z = sample_sphere(8, 1.0, &mut rng);
            let fd = tangential_jacobian(&fd_only, &z, 1e-5).unwrap();
            let exact = field.analytic_jacobian(&z).unwrap() * tangent_projection(&z);
            assert!((fd - exact).amax() < 1e-6);
        }
    }

    #[test]
    fn small_dimension_rejected() {
        assert_eq!(
            SphereField::identity(2, 1.0).unwrap_err(),
            SteinError::DimensionTooSmall(2)
        );
        assert!(matches!(
            SphereField::identity(4, -1.0),
            Err(SteinError::InvalidRadius(_))
        ));
    }

    #[test]
    fn identity_field_is_exact() {
        let f = SphereField::identity(10, 1.3).unwrap();
        let r = check_first_order(&f, 200, 6).unwrap();
        let c = &r.checks[0];
        assert!((c.lhs_estimate - 1.69).abs() < 1e-12);
        assert!((c.rhs_estimate - 1.69).abs() < 1e-12);
        assert!(r.passed());
        let r = check_second_order(&f, 200, 6).unwrap();
        // (n - (n-1))^2 = 1 on every sample
        assert!((r.checks[0].lhs_estimate - 1.0).abs() < 1e-10);
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn constant_field() {
        let c = DVector::from_fn(6, |i, _| i as f64 - 2.0);
        let c2 = c.norm_squared();
        let f = SphereField::constant(c, 2.0).unwrap();
        let r = check_poincare(&f, 500, 7).unwrap();
        assert!(r.checks[0].lhs_estimate.abs() < 1e-12 && r.checks[0].rhs_estimate == 0.0);
        assert!(r.passed());
        let r = check_second_order(&f, 20_000, 7).unwrap();
        // E[(n c'z / R^2)^2] = n |c|^2 / R^2
        let expected = 6.0 * c2 / 4.0;
        assert!((r.checks[0].rhs_estimate - expected).abs() < 1e-10);
        assert!(r.passed(), "{r:?}");
        let r = check_normalized_bounds(&f, 500, 7).unwrap();
        assert!(r.checks[0].lhs_estimate.abs() < 1e-20);
        assert!(r.passed());
    }

    #[test]
    fn normalized_identity_field_bounds() {
        // f = z / R: xi_f = R / n, E f = 0
        let (n, r) = (9, 1.7);
        let f = SphereField::identity(n, r).unwrap();
        let rep = check_normalized_bounds(&f, 2000, 8).unwrap();
        let nf = n as f64;
        assert!((rep.checks[0].rhs_estimate - 2.0 * r * r * (nf - 1.0) / (nf * (nf - 2.0))).abs() < 1e-9);
        assert!(rep.checks[0].lhs_estimate <= rep.checks[0].rhs_estimate);
        assert!(rep.passed(), "{rep:?}");
        assert_eq!(rep.rejected, 0);
    }

    #[test]
    fn reproducible_with_seed() {
        let f = SphereField::random_linear(5, 1.0, 9).unwrap();
        let a = check_second_order(&f, 3000, 11).unwrap();
        let b = check_second_order(&f, 3000, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn radial_extension_is_scale_invariant() {
        let f = PsiPlugin::random(12, 4, 1).unwrap().into_field(1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let z = sample_sphere(12, 1.0, &mut rng);
        check_radial_invariance(&f, &z, 1e-8).unwrap();
    }
}

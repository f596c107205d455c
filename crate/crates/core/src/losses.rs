//! Robust loss functions `rho` together with their derivative `psi` and the
//! almost-everywhere second derivative `psi'`.
//!
//! Every shipped loss is convex, has a Lipschitz `psi`, and satisfies a
//! uniform lower bound `psi'(x) + psi(x)^2 >= K^2`. The bound can be checked
//! numerically on a grid with [`check_assumption_rho`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("scale must be finite and positive, got {0}")]
    InvalidScale(f64),
    #[error("unknown loss `{0}` (expected huber, pseudo_huber, smoothed_huber or logistic1)")]
    UnknownLoss(String),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error(
        "loss assumption violated: min psi'+psi^2 = {min_psi2_plus_psiprime:.3e} < K^2 = {k_sq:.3e} at x = {argmin:.4}"
    )]
    AssumptionViolated {
        min_psi2_plus_psiprime: f64,
        k_sq: f64,
        argmin: f64,
    },
}

/// Anything that behaves like a loss: value, derivative and a.e. second
/// derivative, plus the declared constants `L` and `K^2`.
pub trait Loss: Send + Sync {
    fn rho(&self, x: f64) -> f64;
    fn psi(&self, x: f64) -> f64;
    fn psi_prime(&self, x: f64) -> f64;
    /// Lipschitz constant of `psi`.
    fn lipschitz(&self) -> f64;
    /// Declared lower bound on `psi' + psi^2`.
    fn k_sq(&self) -> f64;
    /// Kink locations of `psi'` on the positive half-line (`psi'` is
    /// discontinuous at `+-k` for each returned `k`).
    fn kinks(&self) -> Vec<f64> {
        Vec::new()
    }
    /// `Some(sigma)` when the loss is the scaled Huber loss, for which
    /// `psi'` only takes the values 0 and 1.
    fn huber_scale(&self) -> Option<f64> {
        None
    }
    /// Natural scale of the loss; used to size assumption-check grids.
    fn scale(&self) -> f64 {
        1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RobustLoss {
    /// `sigma^2 H(x / sigma)` with `H` the unit Huber function.
    Huber { sigma: f64 },
    /// `sigma^2 (sqrt(1 + (x/sigma)^2) - 1)`.
    PseudoHuber { sigma: f64 },
    /// Piecewise-cubic smoothing of the Huber loss with knots at 1 and 2,
    /// scaled as `sigma^2 s(x / sigma)`.
    SmoothedHuber { sigma: f64 },
    /// `log(1 + e^x)`.
    #[serde(rename = "logistic1")]
    OneSidedLogistic,
}

/// Range used to declare `K^2` for the one-sided logistic loss, whose
/// `psi' + psi^2 = sigmoid(x)` has infimum 0 over the whole line.
pub const LOGISTIC_CHECK_RANGE: f64 = 10.0;

impl RobustLoss {
    pub fn huber(sigma: f64) -> Result<Self, LossError> {
        check_scale(sigma)?;
        Ok(RobustLoss::Huber { sigma })
    }

    pub fn pseudo_huber(sigma: f64) -> Result<Self, LossError> {
        check_scale(sigma)?;
        Ok(RobustLoss::PseudoHuber { sigma })
    }

    pub fn smoothed_huber(sigma: f64) -> Result<Self, LossError> {
        check_scale(sigma)?;
        Ok(RobustLoss::SmoothedHuber { sigma })
    }

    pub fn one_sided_logistic() -> Self {
        RobustLoss::OneSidedLogistic
    }

    /// Parses the configuration names `huber`, `pseudo_huber`,
    /// `smoothed_huber` and `logistic1`. The scale is ignored for `logistic1`.
    pub fn from_name(name: &str, sigma: f64) -> Result<Self, LossError> {
        match name {
            "huber" => Self::huber(sigma),
            "pseudo_huber" => Self::pseudo_huber(sigma),
            "smoothed_huber" => Self::smoothed_huber(sigma),
            "logistic1" | "one_sided_logistic" => Ok(Self::one_sided_logistic()),
            other => Err(LossError::UnknownLoss(other.to_string())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            RobustLoss::Huber { .. } => "huber",
            RobustLoss::PseudoHuber { .. } => "pseudo_huber",
            RobustLoss::SmoothedHuber { .. } => "smoothed_huber",
            RobustLoss::OneSidedLogistic => "logistic1",
        }
    }

    /// Re-validates a descriptor, e.g. one obtained by deserialization.
    pub fn validate(&self) -> Result<(), LossError> {
        match *self {
            RobustLoss::Huber { sigma }
            | RobustLoss::PseudoHuber { sigma }
            | RobustLoss::SmoothedHuber { sigma } => check_scale(sigma),
            RobustLoss::OneSidedLogistic => Ok(()),
        }
    }
}

fn check_scale(sigma: f64) -> Result<(), LossError> {
    if sigma.is_finite() && sigma > 0.0 {
        Ok(())
    } else {
        Err(LossError::InvalidScale(sigma))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// Unit smoothed Huber on u >= 0.
fn smoothed_rho(u: f64) -> f64 {
    if u <= 1.0 {
        0.5 * u * u
    } else if u < 2.0 {
        1.0 / 6.0 - u / 2.0 + u * u - u * u * u / 6.0
    } else {
        -7.0 / 6.0 + 1.5 * u
    }
}

fn smoothed_psi(u: f64) -> f64 {
    if u <= 1.0 {
        u
    } else if u < 2.0 {
        -0.5 + 2.0 * u - 0.5 * u * u
    } else {
        1.5
    }
}

fn smoothed_psi_prime(u: f64) -> f64 {
    if u <= 1.0 {
        1.0
    } else if u < 2.0 {
        2.0 - u
    } else {
        0.0
    }
}

impl Loss for RobustLoss {
    fn rho(&self, x: f64) -> f64 {
        match *self {
            RobustLoss::Huber { sigma } => {
                let u = (x / sigma).abs();
                let h = if u <= 1.0 { 0.5 * u * u } else { u - 0.5 };
                sigma * sigma * h
            }
            RobustLoss::PseudoHuber { sigma } => {
                let u = x / sigma;
                // sqrt(1+u^2) - 1 written to avoid cancellation near 0
                sigma * sigma * (u * u / ((1.0 + u * u).sqrt() + 1.0))
            }
            RobustLoss::SmoothedHuber { sigma } => sigma * sigma * smoothed_rho((x / sigma).abs()),
            RobustLoss::OneSidedLogistic => {
                if x > 0.0 {
                    x + (-x).exp().ln_1p()
                } else {
                    x.exp().ln_1p()
                }
            }
        }
    }

    fn psi(&self, x: f64) -> f64 {
        match *self {
            RobustLoss::Huber { sigma } => x.clamp(-sigma, sigma),
            RobustLoss::PseudoHuber { sigma } => {
                let u = x / sigma;
                x / (1.0 + u * u).sqrt()
            }
            RobustLoss::SmoothedHuber { sigma } => {
                let u = x / sigma;
                sigma * u.signum() * smoothed_psi(u.abs())
            }
            RobustLoss::OneSidedLogistic => sigmoid(x),
        }
    }

    /// At the Huber kink `|x| = sigma` the quadratic-branch value 1 is used.
    fn psi_prime(&self, x: f64) -> f64 {
        match *self {
            RobustLoss::Huber { sigma } => {
                if x.abs() <= sigma {
                    1.0
                } else {
                    0.0
                }
            }
            RobustLoss::PseudoHuber { sigma } => {
                let u = x / sigma;
                (1.0 + u * u).powf(-1.5)
            }
            RobustLoss::SmoothedHuber { sigma } => smoothed_psi_prime((x / sigma).abs()),
            RobustLoss::OneSidedLogistic => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
        }
    }

    fn lipschitz(&self) -> f64 {
        match self {
            RobustLoss::OneSidedLogistic => 0.25,
            _ => 1.0,
        }
    }

    fn k_sq(&self) -> f64 {
        match *self {
            RobustLoss::Huber { sigma } | RobustLoss::SmoothedHuber { sigma } => {
                (sigma * sigma).min(1.0)
            }
            RobustLoss::PseudoHuber { sigma } => {
                // minimize t^{3/2} + sigma^2 (1 - t) over t = 1/(1+u^2) in (0, 1]
                let s2 = sigma * sigma;
                if s2 <= 1.5 {
                    s2 - 4.0 * s2 * s2 * s2 / 27.0
                } else {
                    1.0
                }
            }
            // psi' + psi^2 = sigmoid(x): positive on any bounded range only.
            RobustLoss::OneSidedLogistic => sigmoid(-LOGISTIC_CHECK_RANGE),
        }
    }

    fn kinks(&self) -> Vec<f64> {
        match *self {
            RobustLoss::Huber { sigma } => vec![sigma],
            _ => Vec::new(),
        }
    }

    fn huber_scale(&self) -> Option<f64> {
        match *self {
            RobustLoss::Huber { sigma } => Some(sigma),
            _ => None,
        }
    }

    fn scale(&self) -> f64 {
        match *self {
            RobustLoss::Huber { sigma }
            | RobustLoss::PseudoHuber { sigma }
            | RobustLoss::SmoothedHuber { sigma } => sigma,
            RobustLoss::OneSidedLogistic => 1.0,
        }
    }
}

/// Probe grid for [`check_assumption_rho`]: `points` equispaced values on
/// `[-half_width * scale, half_width * scale]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub half_width: f64,
    pub points: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            half_width: 10.0,
            points: 10_001,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssumptionReport {
    pub min_psi2_plus_psiprime: f64,
    pub argmin: f64,
    pub max_lipschitz_ratio: f64,
    pub declared_k_sq: f64,
    pub declared_lipschitz: f64,
    pub monotone: bool,
    pub lipschitz_ok: bool,
}

/// Grid-based check of the loss assumptions: `psi` nondecreasing and
/// `L`-Lipschitz, and `psi' + psi^2 >= K^2`.
pub fn check_assumption_rho<L: Loss + ?Sized>(
    loss: &L,
    grid: GridSpec,
) -> Result<AssumptionReport, LossError> {
    if grid.points < 10_000 || !(grid.half_width > 0.0) {
        return Err(LossError::InvalidGrid(format!(
            "need >= 10000 points and a positive half-width, got {} points on +-{}",
            grid.points, grid.half_width
        )));
    }
    let a = grid.half_width * loss.scale();
    let step = 2.0 * a / (grid.points - 1) as f64;
    let mut min_val = f64::INFINITY;
    let mut argmin = 0.0;
    let mut max_ratio: f64 = 0.0;
    let mut monotone = true;
    let mut prev: Option<(f64, f64)> = None;
    for k in 0..grid.points {
        let x = -a + step * k as f64;
        let p = loss.psi(x);
        let v = loss.psi_prime(x) + p * p;
        if v < min_val {
            min_val = v;
            argmin = x;
        }
        if let Some((xp, pp)) = prev {
            if p < pp - 1e-15 {
                monotone = false;
            }
            max_ratio = max_ratio.max((p - pp).abs() / (x - xp));
        }
        prev = Some((x, p));
    }
    let report = AssumptionReport {
        min_psi2_plus_psiprime: min_val,
        argmin,
        max_lipschitz_ratio: max_ratio,
        declared_k_sq: loss.k_sq(),
        declared_lipschitz: loss.lipschitz(),
        monotone,
        lipschitz_ok: max_ratio <= loss.lipschitz() * (1.0 + 1e-9),
    };
    if !(loss.k_sq() > 0.0) || min_val < loss.k_sq() - 1e-9 {
        return Err(LossError::AssumptionViolated {
            min_psi2_plus_psiprime: min_val,
            k_sq: loss.k_sq(),
            argmin,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `H((|x| - 1)_+)`: zero on [-1, 1], so `psi' + psi^2` vanishes there.
    struct EpsInsensitive;

    impl Loss for EpsInsensitive {
        fn rho(&self, x: f64) -> f64 {
            RobustLoss::Huber { sigma: 1.0 }.rho((x.abs() - 1.0).max(0.0))
        }
        fn psi(&self, x: f64) -> f64 {
            x.signum() * (x.abs() - 1.0).clamp(0.0, 1.0)
        }
        fn psi_prime(&self, x: f64) -> f64 {
            let u = x.abs();
            if u > 1.0 && u <= 2.0 {
                1.0
            } else {
                0.0
            }
        }
        fn lipschitz(&self) -> f64 {
            1.0
        }
        fn k_sq(&self) -> f64 {
            0.5
        }
    }

    fn all_losses() -> Vec<RobustLoss> {
        vec![
            RobustLoss::huber(1.0).unwrap(),
            RobustLoss::huber(0.5).unwrap(),
            RobustLoss::pseudo_huber(1.0).unwrap(),
            RobustLoss::pseudo_huber(2.0).unwrap(),
            RobustLoss::smoothed_huber(1.0).unwrap(),
            RobustLoss::smoothed_huber(0.7).unwrap(),
            RobustLoss::one_sided_logistic(),
        ]
    }

    #[test]
    fn huber_values() {
        let h = RobustLoss::huber(1.0).unwrap();
        assert_eq!(h.rho(0.5), 0.125);
        assert_eq!(h.rho(2.0), 1.5);
        assert_eq!(h.psi(2.0), 1.0);
        assert_eq!(h.psi_prime(0.5), 1.0);
        assert_eq!(h.psi_prime(1.0), 1.0);
        assert_eq!(h.psi_prime(-1.0), 1.0);
        assert_eq!(h.psi_prime(1.0 + 1e-12), 0.0);
        let h2 = RobustLoss::huber(2.0).unwrap();
        // sigma^2 H(3/2) = 4 * (1.5 - 0.5)
        assert!((h2.rho(3.0) - 4.0).abs() < 1e-15);
    }

    #[test]
    fn pseudo_huber_values() {
        let l = RobustLoss::pseudo_huber(1.0).unwrap();
        assert_eq!(l.rho(0.0), 0.0);
        assert_eq!(l.psi(0.0), 0.0);
        for &x in &[-3.0, -0.2, 0.7, 5.0] {
            assert!((l.psi(x) - x / (1.0 + x * x).sqrt()).abs() < 1e-15);
            assert!((l.psi(-x) + l.psi(x)).abs() < 1e-15);
        }
        let r = check_assumption_rho(&l, GridSpec::default()).unwrap();
        assert!((r.min_psi2_plus_psiprime - 23.0 / 27.0).abs() < 1e-3);
        assert!((l.k_sq() - 23.0 / 27.0).abs() < 1e-15);
    }

    #[test]
    fn huber_assumption_min_is_one() {
        let r = check_assumption_rho(&RobustLoss::huber(1.0).unwrap(), GridSpec::default()).unwrap();
        assert!((r.min_psi2_plus_psiprime - 1.0).abs() < 1e-12);
        assert!(r.monotone && r.lipschitz_ok);
    }

    #[test]
    fn logistic_assumption_positive_on_grid() {
        let l = RobustLoss::one_sided_logistic();
        let r = check_assumption_rho(&l, GridSpec::default()).unwrap();
        // psi' + psi^2 = sigmoid(x); independent 1-d minimization by golden
        // section over the grid range
        let f = |x: f64| {
            let s = 1.0 / (1.0 + (-x).exp());
            s * (1.0 - s) + s * s
        };
        let (mut a, mut b) = (-10.0_f64, 10.0_f64);
        let g = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..200 {
            let c = b - g * (b - a);
            let d = a + g * (b - a);
            if f(c) < f(d) {
                b = d;
            } else {
                a = c;
            }
        }
        let oracle = f(0.5 * (a + b));
        assert!(r.min_psi2_plus_psiprime > 0.0);
        assert!((r.min_psi2_plus_psiprime - oracle).abs() < 1e-9);
    }

    #[test]
    fn eps_insensitive_is_rejected() {
        let err = check_assumption_rho(&EpsInsensitive, GridSpec::default()).unwrap_err();
        assert!(matches!(err, LossError::AssumptionViolated { .. }));
    }

    #[test]
    fn coarse_grid_rejected() {
        let err = check_assumption_rho(
            &RobustLoss::huber(1.0).unwrap(),
            GridSpec {
                half_width: 10.0,
                points: 100,
            },
        )
        .unwrap_err();
        assert!(matches!(err, LossError::InvalidGrid(_)));
    }

    #[test]
    fn all_losses_pass_their_declared_constants() {
        for l in all_losses() {
            let r = check_assumption_rho(&l, GridSpec::default())
                .unwrap_or_else(|e| panic!("{l:?}: {e}"));
            assert!(r.monotone, "{l:?}");
            assert!(r.lipschitz_ok, "{l:?}: {}", r.max_lipschitz_ratio);
        }
    }

    #[test]
    fn smoothed_huber_is_c1_at_knots() {
        let l = RobustLoss::smoothed_huber(1.0).unwrap();
        let e = 1e-9;
        for &k in &[1.0, 2.0, -1.0, -2.0] {
            assert!((l.rho(k - e) - l.rho(k + e)).abs() < 1e-8);
            assert!((l.psi(k - e) - l.psi(k + e)).abs() < 1e-8);
            assert!((l.psi_prime(k - e) - l.psi_prime(k + e)).abs() < 1e-8);
        }
        assert!((l.rho(2.0) - 11.0 / 6.0).abs() < 1e-15);
        assert_eq!(l.psi(3.0), 1.5);
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let h = 1e-5;
        for l in all_losses() {
            let kinks: Vec<f64> = l
                .kinks()
                .into_iter()
                .chain(match l {
                    RobustLoss::SmoothedHuber { sigma } => vec![sigma, 2.0 * sigma],
                    _ => vec![],
                })
                .collect();
            for k in 0..400 {
                let x = -8.0 + 16.0 * (k as f64 + 0.37) / 400.0;
                if kinks.iter().any(|&c| (x.abs() - c).abs() < 1e-3) {
                    continue;
                }
                let d_rho = (l.rho(x + h) - l.rho(x - h)) / (2.0 * h);
                let d_psi = (l.psi(x + h) - l.psi(x - h)) / (2.0 * h);
                assert!((l.psi(x) - d_rho).abs() < 1e-7, "{l:?} psi at {x}");
                assert!((l.psi_prime(x) - d_psi).abs() < 1e-7, "{l:?} psi' at {x}");
            }
        }
    }

    #[test]
    fn rho_nonnegative_with_zero_at_origin() {
        for l in all_losses() {
            if l != RobustLoss::OneSidedLogistic {
                assert_eq!(l.rho(0.0), 0.0);
            }
            for k in 0..200 {
                let x = -20.0 + 0.2 * k as f64;
                assert!(l.rho(x) >= 0.0);
            }
        }
    }

    #[test]
    fn config_names_round_trip() {
        for l in all_losses() {
            let back = RobustLoss::from_name(l.name(), l.scale()).unwrap();
            assert_eq!(back, l);
        }
        assert!(RobustLoss::from_name("lad", 1.0).is_err());
        assert!(RobustLoss::huber(0.0).is_err());
        assert!(RobustLoss::huber(f64::NAN).is_err());
    }
}

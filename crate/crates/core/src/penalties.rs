//! Strongly convex penalties `g`: the Elastic-Net `lambda |b|_1 + tau |b|^2 / 2`
//! and the ridge `tau |b|^2 / 2`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PenaltyError {
    #[error("lambda must be finite and nonnegative, got {0}")]
    InvalidLambda(f64),
    #[error("tau must be finite and positive, got {0} (tau = 0 is only allowed for table reproduction)")]
    InvalidTau(f64),
    #[error("unknown penalty `{0}` (expected elastic_net or ridge)")]
    UnknownPenalty(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Penalty {
    ElasticNet { lambda: f64, tau: f64 },
    Ridge { tau: f64 },
}

impl Penalty {
    pub fn elastic_net(lambda: f64, tau: f64) -> Result<Self, PenaltyError> {
        check_lambda(lambda)?;
        check_tau(tau)?;
        Ok(Penalty::ElasticNet { lambda, tau })
    }

    /// Elastic-Net that also accepts `tau = 0` (the pure lasso). The
    /// resulting problem is outside the strong-convexity assumption: the
    /// minimizer may be non-unique and the inference guarantees do not apply.
    pub fn elastic_net_allow_tau_zero(lambda: f64, tau: f64) -> Result<Self, PenaltyError> {
        check_lambda(lambda)?;
        if !(tau.is_finite() && tau >= 0.0) {
            return Err(PenaltyError::InvalidTau(tau));
        }
        Ok(Penalty::ElasticNet { lambda, tau })
    }

    pub fn ridge(tau: f64) -> Result<Self, PenaltyError> {
        check_tau(tau)?;
        Ok(Penalty::Ridge { tau })
    }

    pub fn from_name(name: &str, lambda: f64, tau: f64) -> Result<Self, PenaltyError> {
        match name {
            "elastic_net" | "enet" => Self::elastic_net(lambda, tau),
            "ridge" => Self::ridge(tau),
            other => Err(PenaltyError::UnknownPenalty(other.to_string())),
        }
    }

    pub fn validate(&self, allow_tau_zero: bool) -> Result<(), PenaltyError> {
        match *self {
            Penalty::ElasticNet { lambda, tau } if allow_tau_zero => {
                Self::elastic_net_allow_tau_zero(lambda, tau).map(|_| ())
            }
            Penalty::ElasticNet { lambda, tau } => Self::elastic_net(lambda, tau).map(|_| ()),
            Penalty::Ridge { tau } => Self::ridge(tau).map(|_| ()),
        }
    }

    pub fn lambda(&self) -> f64 {
        match *self {
            Penalty::ElasticNet { lambda, .. } => lambda,
            Penalty::Ridge { .. } => 0.0,
        }
    }

    /// Strong-convexity constant.
    pub fn tau(&self) -> f64 {
        match *self {
            Penalty::ElasticNet { tau, .. } | Penalty::Ridge { tau } => tau,
        }
    }

    pub fn is_strongly_convex(&self) -> bool {
        self.tau() > 0.0
    }

    pub fn value(&self, b: &DVector<f64>) -> f64 {
        let l1 = if self.lambda() > 0.0 {
            self.lambda() * b.iter().map(|v| v.abs()).sum::<f64>()
        } else {
            0.0
        };
        l1 + 0.5 * self.tau() * b.norm_squared()
    }

    /// `argmin_b |b - v|^2 / (2 step) + g(b)`: soft-threshold at
    /// `step * lambda`, then shrink by `1 + step * tau`.
    pub fn prox(&self, v: &DVector<f64>, step: f64) -> DVector<f64> {
        let mut out = v.clone();
        self.prox_in_place(&mut out, step);
        out
    }

    pub fn prox_in_place(&self, v: &mut DVector<f64>, step: f64) {
        debug_assert!(step > 0.0);
        let thr = step * self.lambda();
        let shrink = 1.0 / (1.0 + step * self.tau());
        for x in v.iter_mut() {
            let a = x.abs() - thr;
            *x = if a > 0.0 { x.signum() * a * shrink } else { 0.0 };
        }
    }

    /// Sup-norm distance from `u` to the subdifferential `dg(b)`. For a zero
    /// coordinate the subdifferential is the interval `[-lambda, lambda]`.
    pub fn kkt_distance(&self, b: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let (lambda, tau) = (self.lambda(), self.tau());
        b.iter()
            .zip(u.iter())
            .map(|(&bj, &uj)| {
                if bj != 0.0 {
                    (uj - lambda * bj.signum() - tau * bj).abs()
                } else {
                    (uj.abs() - lambda).max(0.0)
                }
            })
            .fold(0.0, f64::max)
    }

    /// Diagonal of the Hessian where it exists (`tau` on every coordinate).
    pub fn hessian_diag(&self) -> f64 {
        self.tau()
    }
}

fn check_lambda(lambda: f64) -> Result<(), PenaltyError> {
    if lambda.is_finite() && lambda >= 0.0 {
        Ok(())
    } else {
        Err(PenaltyError::InvalidLambda(lambda))
    }
}

fn check_tau(tau: f64) -> Result<(), PenaltyError> {
    if tau.is_finite() && tau > 0.0 {
        Ok(())
    } else {
        Err(PenaltyError::InvalidTau(tau))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    #[test]
    fn values() {
        let g = Penalty::elastic_net(1.0, 2.0).unwrap();
        assert_eq!(g.value(&dv(&[1.0, -1.0])), 4.0);
        assert_eq!(Penalty::ridge(1.0).unwrap().value(&dv(&[0.0, 0.0])), 0.0);
        let b = dv(&[0.3, -1.7, 2.2]);
        assert_eq!(
            Penalty::elastic_net(0.0, 0.4).unwrap().value(&b),
            Penalty::ridge(0.4).unwrap().value(&b)
        );
    }

    #[test]
    fn prox_closed_forms() {
        let g = Penalty::elastic_net(1.0, 1.0).unwrap();
        assert_eq!(g.prox(&dv(&[3.0]), 1.0)[0], 1.0);
        let g = Penalty::elastic_net(1.0, 0.1).unwrap();
        assert_eq!(g.prox(&dv(&[0.5]), 1.0)[0], 0.0);
        let v = dv(&[3.0, -0.2, 1e3]);
        let p = g.prox(&v, 1e-8);
        assert!((p - &v).norm() <= 1e-6 * v.norm());
    }

    #[test]
    fn kkt_examples() {
        let g = Penalty::elastic_net(1.0, 1.0).unwrap();
        assert_eq!(g.kkt_distance(&dv(&[1.0]), &dv(&[2.0])), 0.0);
        assert_eq!(g.kkt_distance(&dv(&[0.0]), &dv(&[0.5])), 0.0);
        assert!((g.kkt_distance(&dv(&[0.0]), &dv(&[1.7])) - 0.7).abs() < 1e-15);
    }

    #[test]
    fn constructors_reject_bad_parameters() {
        assert!(Penalty::elastic_net(1.0, 0.0).is_err());
        assert!(Penalty::elastic_net(-1.0, 1.0).is_err());
        assert!(Penalty::ridge(f64::NAN).is_err());
        assert!(Penalty::elastic_net_allow_tau_zero(1.0, 0.0).is_ok());
        assert!(Penalty::elastic_net_allow_tau_zero(1.0, -0.1).is_err());
        assert!(Penalty::from_name("group_lasso", 1.0, 1.0).is_err());
    }

    fn penalty_strategy() -> impl Strategy<Value = Penalty> {
        prop_oneof![
            (0.0..3.0f64, 0.01..3.0f64).prop_map(|(l, t)| Penalty::elastic_net(l, t).unwrap()),
            (0.01..3.0f64).prop_map(|t| Penalty::ridge(t).unwrap()),
        ]
    }

    fn vec_strategy(len: usize) -> impl Strategy<Value = DVector<f64>> {
        proptest::collection::vec(-5.0..5.0f64, len).prop_map(DVector::from_vec)
    }

    // a subgradient of g at a, with the free zero coordinates drawn from w in [-1, 1]
    fn subgradient(g: &Penalty, a: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            a.len(),
            a.iter().zip(w.iter()).map(|(&aj, &wj)| {
                if aj != 0.0 {
                    g.lambda() * aj.signum() + g.tau() * aj
                } else {
                    g.lambda() * wj.clamp(-1.0, 1.0)
                }
            }),
        )
    }

    proptest! {
        #[test]
        fn prox_satisfies_its_own_optimality(g in penalty_strategy(), v in vec_strategy(6), t in 0.01..10.0f64) {
            let p = g.prox(&v, t);
            let u = (&v - &p) / t;
            prop_assert!(g.kkt_distance(&p, &u) <= 1e-10);
        }

        #[test]
        fn prox_is_nonexpansive(g in penalty_strategy(), v1 in vec_strategy(5), v2 in vec_strategy(5), t in 0.01..10.0f64) {
            let d = (g.prox(&v1, t) - g.prox(&v2, t)).norm();
            prop_assert!(d <= (&v1 - &v2).norm() + 1e-12);
        }

        #[test]
        fn strong_convexity_inequalities(
            g in penalty_strategy(),
            a in vec_strategy(4),
            b in vec_strategy(4),
            wa in vec_strategy(4),
            wb in vec_strategy(4),
            zero_mask in proptest::collection::vec(any::<bool>(), 4),
        ) {
            let mut a = a;
            for (x, z) in a.iter_mut().zip(zero_mask.iter()) {
                if *z { *x = 0.0; }
            }
            let u = subgradient(&g, &a, &(wa / 5.0));
            let v = subgradient(&g, &b, &(wb / 5.0));
            let d = &a - &b;
            let tau = g.tau();
            prop_assert!((&u - &v).dot(&d) >= tau * d.norm_squared() - 1e-10);
            // g(b) - g(a) >= u'(b - a) + tau/2 |b - a|^2
            let lhs = g.value(&b) - g.value(&a);
            let rhs = u.dot(&(&b - &a)) + 0.5 * tau * d.norm_squared();
            prop_assert!(lhs >= rhs - 1e-10);
        }
    }
}

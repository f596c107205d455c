//! Penalized robust M-estimation with debiased, coordinate-wise inference in
//! proportional dimensions.
//!
//! The crate is organised bottom-up:
//!
//! * [`losses`] and [`penalties`]: the building blocks `rho` and `g`.
//! * [`solver`]: the penalized M-estimator and its KKT certificate.
//! * [`dof`]: the divergence `trace[d psi / d y]`, in closed form for the
//!   Huber loss with the Elastic-Net penalty and numerically in general.
//! * [`inference`]: variance estimate, debiased estimates, confidence
//!   intervals and the oracle pivots.
//! * [`stein`]: Monte-Carlo checks of Stein identities on the sphere.
//! * [`sim`]: the replication harness for the heavy-tailed noise study.

pub mod dof;
pub mod inference;
pub mod losses;
pub mod normal;
pub mod penalties;
pub mod serde_vec;
pub mod sim;
pub mod solver;
pub mod stein;

pub use losses::{Loss, RobustLoss};
pub use penalties::Penalty;
pub use solver::{fit, fit_from, FitResult, SolverOptions};

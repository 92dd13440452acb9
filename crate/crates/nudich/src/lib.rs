//! Nonuniform `(h, k, mu, nu)`-dichotomies for nonautonomous linear systems `x' = A(t) x`.
//!
//! The crate computes evolution operators, checks and fits dichotomy bounds on
//! time grids, builds quadratic Lyapunov functions, perturbed projections,
//! a numerical linearizing conjugacy and Lipschitz stable manifolds. Every
//! construction returns a report with the measured residuals next to the
//! constants it was checked against.

pub mod conjugacy;
pub mod dichotomy;
pub mod error;
pub mod evolution;
pub mod growth;
pub mod linalg;
pub mod lyapfun;
pub mod manifold;
pub mod quad;
pub mod robustness;
pub mod spectrum;
pub mod system;
pub mod varconst;

pub use error::{Error, Result};
pub use evolution::{EvolutionOperator, IntegratorConfig};
pub use growth::{Domain, GrowthRate, RateQuadruple};
pub use system::{CoefficientField, NonlinearTerm};

pub use nalgebra::{DMatrix, DVector};

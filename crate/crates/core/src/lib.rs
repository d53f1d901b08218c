//! Monte Carlo solver and verification toolkit for systems of semilinear
//! integro-partial differential equations driven by a Lévy measure with
//! infinite activity.
//!
//! The solution `u = (u^i)` is approximated through the associated forward
//! jump-diffusion and backward SDE with jumps, after truncating the Lévy
//! measure to `{|e| >= 1/k}`. Modules:
//!
//! * [`levy`]: the jump measure, its truncations, quadrature and sampling.
//! * [`coefficients`]: the coefficient bundle, Mao moduli, assumption
//!   validators and the Bihari comparison envelope.
//! * [`sde`]: Euler simulation of the forward process and moment checks.
//! * [`bsde`]: least-squares backward solver, residuals and ladder studies.
//! * [`ipde`]: nonlocal operators and the viscosity residual.
//! * [`scenario`]: scenario files and the named-function registry.
//! * [`report`]: diagnostics and CSV emission.

pub mod bsde;
pub mod coefficients;
pub mod error;
pub mod ipde;
pub mod levy;
pub mod quadrature;
pub mod report;
pub mod rng;
pub mod scenario;
pub mod sde;
pub mod stats;

pub use error::{Error, Result, ValidationIssue};
pub use levy::{JumpTrain, LevyMeasure, TruncationIndex};
pub use bsde::{MeshSolution, SolverOptions};
pub use coefficients::{Dims, ModelCoefficients};
pub use scenario::ScenarioConfig;
pub use sde::{InitialState, PathEnsemble, TimeGrid};

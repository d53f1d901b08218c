//! Backward SDE with jumps: regression solver, residuals and ladder studies.

mod basis;
mod continuity;
mod ladder;
mod residual;
mod solver;

pub use basis::{multi_indices, regress, BasisSpec, Features, Regression, RegressionOptions};
pub use continuity::{continuity_modulus_probe, ContinuityFit, ContinuityProbe};
pub use ladder::{ladder_study, ConvergenceReport, LadderConfig, Rung, RungGap};
pub use residual::{bsde_residual, reestimate_jump_field, RepresentationCheck, ResidualStat};
pub use solver::{
    growth_envelope, jump_increment_field, solve_backward, Evaluation, GrowthEnvelope, Interpolation, Layer,
    MeshSolution, SolverOptions, ZMethod,
};

#[cfg(test)]
pub(crate) use solver::NonlocalField;

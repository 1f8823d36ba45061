//! Set arithmetic for the tube construction: boxes, H-polytopes, zonotopes,
//! the minimal robust positively invariant set and terminal sets.

mod invariant;
mod sets;
mod zonotope;

pub use invariant::{
    mrpi_approx, mrpi_zonotope, terminal_set, terminal_set_about, ClosedLoopMatrix, MrpiApprox,
    ANCHOR_SNAP_TOL, TERMINAL_MAX_ITER,
    TerminalSet,
};
pub use sets::{minkowski_sum_box, pontryagin_diff, BoxSet, Polytope};
pub use zonotope::Zonotope;

use thiserror::Error;

/// Absolute tolerance for membership and redundancy tests.
pub const GEOMETRY_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid set: {0}")]
    Invalid(String),
    #[error("set is unbounded in direction {0:?}")]
    Unbounded(Vec<f64>),
    #[error("linear program failed: {0}")]
    Solver(String),
    #[error("closed-loop matrix is not Schur stable (spectral radius {0})")]
    NotStable(f64),
    #[error("no convergence after {0} iterations")]
    NonConvergence(usize),
    #[error("facet enumeration would visit {0} generator subsets")]
    TooManyFacets(usize),
}

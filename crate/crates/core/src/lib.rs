//! Global solver for bilevel inverse optimal control problems.
//!
//! The lower level is a box-constrained elliptic optimal control problem
//! whose tracking weights are the parameters. The bilevel problem is
//! rewritten with the optimal-value function `φ` of the lower level, `φ` is
//! relaxed by affine interpolants on a simplicial subdivision of the
//! parameter box, and a branch-and-bound driver closes the gap between
//! relaxation lower bounds and feasible upper bounds.

pub mod banded;
pub mod discretization;
pub mod error;
pub mod geometry;
pub mod global_solver;
pub mod lower_level;
pub mod oracle;
pub mod penalty_newton;
pub mod problem;
mod reduced;

pub use error::{Error, Result};
pub use geometry::{Affine, Simplex, Status};
pub use global_solver::{run, run_with, GlobalResult, SolverSettings, Termination};
pub use lower_level::{solve_lower_level, LowerLevelSolution, ValueFunction};
pub use penalty_newton::{GammaSearch, KktIterate, Subproblem, SubproblemResult};
pub use problem::{Objective, Problem, ProblemConfig, Target};

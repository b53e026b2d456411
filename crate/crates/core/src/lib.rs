//! Worst-off distributionally robust optimization.
//!
//! Robust training of small binary classifiers when group labels are only
//! partially observed. The inner maximization over soft group assignments is
//! a transportation-style linear program with a rank-1 cost, solved exactly
//! by [`assignment::solve_assignments`] and cross-checked against a dense
//! simplex oracle. Group weights follow exponentiated-gradient ascent on the
//! simplex ([`group_weights`]).
//!
//! The crate also carries the surrounding experiment harness: synthetic
//! spurious-correlation datasets ([`data`]), baseline trainers ([`trainers`]),
//! Monte Carlo checks of the marginal-containment bounds ([`bounds`]),
//! per-group evaluation with NVP model selection ([`evaluation`]) and the
//! command-line front end ([`cli`]).

pub mod assignment;
pub mod bounds;
pub mod cli;
pub mod data;
pub mod evaluation;
pub mod group_weights;
pub mod matrix;
pub mod predictor;
pub mod seed;
pub mod trainers;

pub use assignment::{
    brute_force_oracle, check_feasible, solve_assignments, AssignmentMatrix, ConstraintSpec,
    Feasibility, SolveProblem, SolverError,
};
pub use group_weights::{exp_ascent, soft_group_losses, GroupWeights};
pub use matrix::Matrix;

//! Independent exact solver for small instances, built on the in-repo dense
//! simplex rather than on the greedy's structure.

use super::simplex::{maximize, Constraint, LpOutcome, Relation};
use super::{AssignmentMatrix, Solution, SolveProblem, SolverError};
use crate::matrix::Matrix;

pub const ORACLE_MAX_ROWS: usize = 10;
pub const ORACLE_MAX_GROUPS: usize = 4;

/// Globally optimal assignment by solving the full LP with a dense simplex.
pub fn brute_force_oracle(problem: &SolveProblem) -> Result<Solution, SolverError> {
    let n = problem.rows();
    let m = problem.groups();
    if n > ORACLE_MAX_ROWS || m > ORACLE_MAX_GROUPS {
        return Err(SolverError::SizeLimitExceeded { rows: n, groups: m });
    }
    problem.validate()?;
    let spec = &problem.constraints;
    let theta = problem.theta();
    let nf = n as f64;

    // One variable per (row, group), pinned rows included and fixed by
    // equality constraints, so the LP sees exactly the stated feasible set.
    let var = |i: usize, j: usize| i * m + j;
    let nv = n * m;
    let mut objective = vec![0.0; nv];
    for i in 0..n {
        for j in 0..m {
            objective[var(i, j)] = problem.losses[i] * theta[j];
        }
    }
    let mut constraints = Vec::new();
    for i in 0..n {
        let mut coeffs = vec![0.0; nv];
        for j in 0..m {
            coeffs[var(i, j)] = 1.0;
        }
        constraints.push(Constraint {
            coeffs,
            relation: Relation::Eq,
            rhs: 1.0,
        });
    }
    for &(i, g) in &spec.pinned {
        let mut coeffs = vec![0.0; nv];
        coeffs[var(i, g)] = 1.0;
        constraints.push(Constraint {
            coeffs,
            relation: Relation::Eq,
            rhs: 1.0,
        });
    }
    for j in 0..m {
        let mut coeffs = vec![0.0; nv];
        for i in 0..n {
            coeffs[var(i, j)] = 1.0;
        }
        constraints.push(Constraint {
            coeffs: coeffs.clone(),
            relation: Relation::Le,
            rhs: nf * (spec.marginals[j] + spec.epsilon),
        });
        constraints.push(Constraint {
            coeffs,
            relation: Relation::Ge,
            rhs: nf * (spec.marginals[j] - spec.epsilon),
        });
    }

    match maximize(&objective, &constraints) {
        LpOutcome::Optimal { x, .. } => {
            let mat = Matrix::from_vec(n, m, x).expect("n*m variables");
            let assignment = AssignmentMatrix::from_matrix(mat);
            let objective = assignment.objective(&problem.losses, &theta);
            Ok(Solution {
                assignment,
                objective,
            })
        }
        LpOutcome::Infeasible => Err(SolverError::InfeasibleConstraints {
            min_epsilon: super::min_epsilon(spec, n),
        }),
        LpOutcome::Unbounded => unreachable!("assignment polytope is bounded"),
    }
}

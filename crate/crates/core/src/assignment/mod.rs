//! Worst-off soft group assignments.
//!
//! The inner maximization picks a row-stochastic `N x M` matrix `g` that
//! maximizes `sum_ij g_ij * theta_j * l_i`, where `l_i` are per-sample losses
//! and `theta_j = q_j / (N * p_j)`. Feasible matrices keep labeled rows
//! one-hot at their observed group and keep every column mass `sum_i g_ij`
//! inside `[N (p_j - eps), N (p_j + eps)]`.
//!
//! The column denominators of the per-group average are replaced by their
//! target values `N p_j`, which turns the problem into a linear program. The
//! cost is rank one over a transportation polytope, so sorting rows by loss
//! and columns by `theta` and filling greedily is optimal:
//!
//! * the objective equals `sum_j (theta_(j) - theta_(j+1)) F(C_j)` where
//!   `C_j` is the cumulative mass of the `j` highest-`theta` columns and `F`
//!   is the (concave, nondecreasing) integral of the sorted loss profile;
//! * every coefficient is nonnegative, so each `C_j` should be as large as the
//!   column bounds allow, and filling columns in `theta` order up to their
//!   upper bound, while reserving the lower bounds of the remaining columns,
//!   attains all those maxima at once.
//!
//! [`brute_force_oracle`] solves the same program with a dense simplex and is
//! used to check the greedy in tests and in `wdro verify --solver`.

mod oracle;
mod verify;
mod simplex;

pub use oracle::{brute_force_oracle, ORACLE_MAX_GROUPS, ORACLE_MAX_ROWS};
pub use verify::{random_instance, verify_solver, SolverReport};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::group_weights::GroupWeights;
use crate::matrix::Matrix;

/// Smallest admissible marginal entry.
pub const MIN_MARGINAL: f64 = 1e-6;
/// Absolute tolerance for column-bound feasibility.
pub const FEAS_TOL: f64 = 1e-9;
/// Added on top of `min_epsilon` when a batch needs its slack relaxed.
pub const RELAX_MARGIN: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("pinned rows violate the marginal bounds; smallest feasible epsilon is {min_epsilon}")]
    InfeasibleConstraints { min_epsilon: f64 },
    #[error("marginal for group {group} is {value}, below the minimum {MIN_MARGINAL}")]
    DegenerateMarginal { group: usize, value: f64 },
    #[error("brute-force oracle limited to {ORACLE_MAX_ROWS} rows and {ORACLE_MAX_GROUPS} groups, got {rows}x{groups}")]
    SizeLimitExceeded { rows: usize, groups: usize },
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
}

/// Marginal constraint set: target marginals, slack and pinned rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSpec {
    pub marginals: Vec<f64>,
    pub epsilon: f64,
    /// `(row, group)` pairs fixing row `row` to the one-hot vector of `group`.
    #[serde(default)]
    pub pinned: Vec<(usize, usize)>,
}

impl ConstraintSpec {
    pub fn new(marginals: Vec<f64>, epsilon: f64, pinned: Vec<(usize, usize)>) -> Self {
        Self {
            marginals,
            epsilon,
            pinned,
        }
    }

    pub fn groups(&self) -> usize {
        self.marginals.len()
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Self {
        Self {
            epsilon,
            ..self.clone()
        }
    }

    /// Check the spec against a problem with `n` rows.
    pub fn validate(&self, n: usize) -> Result<(), SolverError> {
        let m = self.marginals.len();
        if m == 0 {
            return Err(SolverError::InvalidProblem("no groups".into()));
        }
        for (group, &value) in self.marginals.iter().enumerate() {
            if !value.is_finite() {
                return Err(SolverError::InvalidProblem(format!(
                    "marginal {group} is not finite"
                )));
            }
            if value < MIN_MARGINAL {
                return Err(SolverError::DegenerateMarginal { group, value });
            }
        }
        let total: f64 = self.marginals.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(SolverError::InvalidProblem(format!(
                "marginals sum to {total}"
            )));
        }
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(SolverError::InvalidProblem(format!(
                "epsilon must be finite and nonnegative, got {}",
                self.epsilon
            )));
        }
        let mut seen = vec![false; n];
        for &(i, j) in &self.pinned {
            if i >= n || j >= m {
                return Err(SolverError::InvalidProblem(format!(
                    "pin ({i}, {j}) out of range for {n} rows and {m} groups"
                )));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(SolverError::InvalidProblem(format!("row {i} pinned twice")));
            }
        }
        Ok(())
    }

    fn pin_counts(&self) -> Vec<f64> {
        let mut counts = vec![0.0; self.marginals.len()];
        for &(_, j) in &self.pinned {
            counts[j] += 1.0;
        }
        counts
    }
}

/// Column-mass bounds left for the free (unpinned) rows.
#[derive(Debug, Clone)]
struct ResidualBounds {
    lower: Vec<f64>,
    upper: Vec<f64>,
    free_rows: f64,
}

fn residual_bounds(spec: &ConstraintSpec, n: usize, eps: f64) -> ResidualBounds {
    let nf = n as f64;
    let pins = spec.pin_counts();
    let lower = spec
        .marginals
        .iter()
        .zip(&pins)
        .map(|(p, c)| (nf * (p - eps) - c).max(0.0))
        .collect();
    let upper = spec
        .marginals
        .iter()
        .zip(&pins)
        .map(|(p, c)| nf * (p + eps) - c)
        .collect();
    ResidualBounds {
        lower,
        upper,
        free_rows: (n - spec.pinned.len()) as f64,
    }
}

impl ResidualBounds {
    fn feasible(&self) -> bool {
        let lo: f64 = self.lower.iter().sum();
        let hi: f64 = self.upper.iter().sum();
        self.upper.iter().all(|u| *u >= -FEAS_TOL)
            && lo <= self.free_rows + FEAS_TOL
            && self.free_rows <= hi + FEAS_TOL
    }
}

/// Result of [`check_feasible`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Feasibility {
    pub feasible: bool,
    /// Smallest slack for which the pin pattern is feasible with `n` rows.
    pub min_epsilon: f64,
}

/// Decide whether the constraint set is nonempty for `n` rows and compute
/// the smallest slack that would make it so.
pub fn check_feasible(constraints: &ConstraintSpec, n: usize) -> Feasibility {
    let feasible = residual_bounds(constraints, n, constraints.epsilon).feasible();
    Feasibility {
        feasible,
        min_epsilon: min_epsilon(constraints, n),
    }
}

fn min_epsilon(spec: &ConstraintSpec, n: usize) -> f64 {
    let nf = n as f64;
    let m = spec.marginals.len();
    let pins = spec.pin_counts();
    let free = (n - spec.pinned.len()) as f64;

    // Upper bounds must cover the pinned rows: n (p_j + eps) >= pins_j.
    let upper_need = spec
        .marginals
        .iter()
        .zip(&pins)
        .map(|(p, c)| c / nf - p)
        .fold(0.0, f64::max);

    // Total upper capacity must cover the free rows.
    let total: f64 = spec.marginals.iter().sum();
    let cap_need = ((1.0 - total) / m as f64).max(0.0);

    // Lower bounds of the free rows: sum_j max(0, a_j - n eps) <= free,
    // with a_j = n p_j - pins_j. Piecewise linear and decreasing in eps.
    let mut a: Vec<f64> = spec
        .marginals
        .iter()
        .zip(&pins)
        .map(|(p, c)| nf * p - c)
        .filter(|v| *v > 0.0)
        .collect();
    a.sort_by(|x, y| y.total_cmp(x));
    let base: f64 = a.iter().sum();
    let lower_need = if base <= free {
        0.0
    } else {
        let mut found = a[0] / nf;
        let mut prefix = 0.0;
        for k in 0..a.len() {
            prefix += a[k];
            let eps = (prefix - free) / ((k + 1) as f64 * nf);
            let next = a.get(k + 1).copied().unwrap_or(0.0);
            if eps * nf >= next && eps * nf <= a[k] {
                found = eps;
                break;
            }
        }
        found.max(0.0)
    };

    upper_need.max(cap_need).max(lower_need)
}

/// A row-stochastic soft assignment matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AssignmentMatrix(Matrix);

impl AssignmentMatrix {
    pub fn from_matrix(m: Matrix) -> Self {
        Self(m)
    }

    /// Hard one-hot assignment from group indices.
    pub fn one_hot(groups: &[usize], m: usize) -> Self {
        let mut mat = Matrix::zeros(groups.len(), m);
        for (i, &g) in groups.iter().enumerate() {
            mat.set(i, g, 1.0);
        }
        Self(mat)
    }

    pub fn rows(&self) -> usize {
        self.0.rows()
    }

    pub fn cols(&self) -> usize {
        self.0.cols()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0.get(i, j)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols()];
        for i in 0..self.rows() {
            for (s, v) in sums.iter_mut().zip(self.row(i)) {
                *s += v;
            }
        }
        sums
    }

    /// Linearized objective `sum_ij g_ij theta_j l_i`.
    pub fn objective(&self, losses: &[f64], theta: &[f64]) -> f64 {
        (0..self.rows())
            .map(|i| {
                let r: f64 = self.row(i).iter().zip(theta).map(|(g, t)| g * t).sum();
                r * losses[i]
            })
            .sum()
    }

    /// Verify entry range, row sums, pins and column bounds at `spec.epsilon`.
    pub fn check(&self, spec: &ConstraintSpec, tol: f64) -> Result<(), String> {
        let n = self.rows() as f64;
        for i in 0..self.rows() {
            let row = self.row(i);
            if let Some(v) = row.iter().find(|v| **v < -tol || **v > 1.0 + tol) {
                return Err(format!("row {i} has entry {v} outside [0, 1]"));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > tol {
                return Err(format!("row {i} sums to {s}"));
            }
        }
        for &(i, j) in &spec.pinned {
            for (k, v) in self.row(i).iter().enumerate() {
                let want = if k == j { 1.0 } else { 0.0 };
                if (v - want).abs() > tol {
                    return Err(format!("pinned row {i} is not one-hot at {j}"));
                }
            }
        }
        for (j, s) in self.column_sums().iter().enumerate() {
            let dev = (s / n - spec.marginals[j]).abs();
            if dev > spec.epsilon + tol {
                return Err(format!(
                    "column {j} mass {s} deviates {dev} from marginal (eps {})",
                    spec.epsilon
                ));
            }
        }
        Ok(())
    }
}

/// One instance of the inner maximization.
#[derive(Debug, Clone, PartialEq)]
pub struct SolveProblem {
    pub losses: Vec<f64>,
    pub weights: GroupWeights,
    pub constraints: ConstraintSpec,
}

impl SolveProblem {
    pub fn new(losses: Vec<f64>, weights: GroupWeights, constraints: ConstraintSpec) -> Self {
        Self {
            losses,
            weights,
            constraints,
        }
    }

    pub fn rows(&self) -> usize {
        self.losses.len()
    }

    pub fn groups(&self) -> usize {
        self.weights.len()
    }

    /// Column costs `theta_j = q_j / (N p_j)`.
    pub fn theta(&self) -> Vec<f64> {
        let n = self.rows() as f64;
        self.weights
            .as_slice()
            .iter()
            .zip(&self.constraints.marginals)
            .map(|(q, p)| q / (n * p))
            .collect()
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        if self.losses.is_empty() {
            return Err(SolverError::InvalidProblem("no samples".into()));
        }
        if let Some(l) = self.losses.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
            return Err(SolverError::InvalidProblem(format!(
                "loss {l} is not finite and nonnegative"
            )));
        }
        if self.weights.len() != self.constraints.groups() {
            return Err(SolverError::InvalidProblem(format!(
                "{} group weights for {} marginals",
                self.weights.len(),
                self.constraints.groups()
            )));
        }
        self.constraints.validate(self.rows())
    }
}

/// Optimal assignment and its linearized objective value.
#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub assignment: AssignmentMatrix,
    pub objective: f64,
}

/// Stable descending order of `values`, ties by ascending index.
fn descending_order(values: &[f64], idx: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut order: Vec<usize> = idx.collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order
}

/// Solve the inner maximization exactly with the greedy monotone filler.
pub fn solve_assignments(problem: &SolveProblem) -> Result<Solution, SolverError> {
    problem.validate()?;
    let spec = &problem.constraints;
    let n = problem.rows();
    let m = problem.groups();
    let bounds = residual_bounds(spec, n, spec.epsilon);
    if !bounds.feasible() {
        return Err(SolverError::InfeasibleConstraints {
            min_epsilon: min_epsilon(spec, n),
        });
    }
    let theta = problem.theta();

    let mut mat = Matrix::zeros(n, m);
    let mut pinned = vec![false; n];
    for &(i, j) in &spec.pinned {
        mat.set(i, j, 1.0);
        pinned[i] = true;
    }
    let rows = descending_order(&problem.losses, (0..n).filter(|i| !pinned[*i]));
    let cols = descending_order(&theta, 0..m);

    // Column capacities for the free rows, highest theta first.
    let mut capacity = vec![0.0; m];
    let mut remaining = bounds.free_rows;
    for (pos, &j) in cols.iter().enumerate() {
        let reserve: f64 = cols[pos + 1..].iter().map(|&k| bounds.lower[k]).sum();
        let c = if pos + 1 == m {
            remaining
        } else {
            bounds.upper[j].min(remaining - reserve).max(0.0)
        };
        capacity[j] = c;
        remaining -= c;
    }

    // Northwest-corner fill: rows by loss, columns by theta.
    let mut col_pos = 0;
    let mut left_in_col = capacity[cols[0]];
    for &i in &rows {
        let mut left_in_row = 1.0;
        while left_in_row > 0.0 {
            let j = cols[col_pos];
            if col_pos + 1 == m {
                mat.set(i, j, mat.get(i, j) + left_in_row);
                break;
            }
            if left_in_col <= 1e-12 {
                col_pos += 1;
                left_in_col = capacity[cols[col_pos]];
                continue;
            }
            let take = left_in_row.min(left_in_col);
            mat.set(i, j, mat.get(i, j) + take);
            left_in_row -= take;
            left_in_col -= take;
            if left_in_row <= 1e-15 {
                break;
            }
        }
    }

    let assignment = AssignmentMatrix(mat);
    let objective = assignment.objective(&problem.losses, &theta);
    Ok(Solution {
        assignment,
        objective,
    })
}

/// Outcome of [`solve_relaxed`]: the solution plus the slack actually used
/// when the requested one was infeasible.
#[derive(Debug, Clone, PartialEq)]
pub struct RelaxedSolution {
    pub solution: Solution,
    pub relaxed_epsilon: Option<f64>,
}

/// Solve, relaxing the slack to `min_epsilon + RELAX_MARGIN` when the pin
/// pattern makes the requested slack infeasible.
pub fn solve_relaxed(problem: &SolveProblem) -> Result<RelaxedSolution, SolverError> {
    match solve_assignments(problem) {
        Ok(solution) => Ok(RelaxedSolution {
            solution,
            relaxed_epsilon: None,
        }),
        Err(SolverError::InfeasibleConstraints { min_epsilon }) => {
            let eps = min_epsilon.max(problem.constraints.epsilon) + RELAX_MARGIN;
            let relaxed = SolveProblem {
                constraints: problem.constraints.with_epsilon(eps),
                ..problem.clone()
            };
            let solution = solve_assignments(&relaxed)?;
            Ok(RelaxedSolution {
                solution,
                relaxed_epsilon: Some(eps),
            })
        }
        Err(e) => Err(e),
    }
}

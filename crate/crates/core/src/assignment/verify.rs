//! Randomized cross-check of the greedy solver against the simplex oracle.

use rand::Rng;
use serde::Serialize;

use super::{
    brute_force_oracle, check_feasible, solve_assignments, ConstraintSpec, SolveProblem,
    RELAX_MARGIN,
};
use crate::group_weights::GroupWeights;
use crate::seed::rng_for;

/// Draw a random feasible instance with at most `max_rows` rows and between
/// two and `max_groups` groups. Roughly 40% of rows are pinned; the slack is
/// the instance's `min_epsilon` plus a random margin (sometimes none).
pub fn random_instance<R: Rng>(rng: &mut R, max_rows: usize, max_groups: usize) -> SolveProblem {
    let n = rng.random_range(1..=max_rows);
    let m = rng.random_range(2..=max_groups.max(2));
    let raw: Vec<f64> = (0..m).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let marginals: Vec<f64> = raw.iter().map(|v| v / total).collect();
    let losses: Vec<f64> = (0..n)
        .map(|_| {
            let l: f64 = rng.random_range(0.0..5.0);
            // Occasional ties.
            if rng.random_bool(0.25) {
                l.round()
            } else {
                l
            }
        })
        .collect();
    let q = GroupWeights::from_unnormalized(
        &(0..m)
            .map(|_| rng.random_range(0.05..1.0))
            .collect::<Vec<f64>>(),
    )
    .expect("positive weights");
    let mut pinned = Vec::new();
    for i in 0..n {
        if rng.random_bool(0.4) {
            pinned.push((i, rng.random_range(0..m)));
        }
    }
    let mut spec = ConstraintSpec::new(marginals, 0.0, pinned);
    let base = check_feasible(&spec, n).min_epsilon;
    spec.epsilon = if rng.random_bool(0.2) {
        base + RELAX_MARGIN
    } else {
        base + rng.random_range(0.0..0.3)
    };
    SolveProblem::new(losses, q, spec)
}

#[derive(Debug, Clone, Serialize)]
pub struct SolverReport {
    pub instances: usize,
    pub max_objective_gap: f64,
    pub failures: Vec<String>,
    pub passed: bool,
}

/// Compare greedy and oracle on `instances` random problems (N <= 8, M <= 3).
pub fn verify_solver(instances: usize, seed: u64) -> SolverReport {
    let mut rng = rng_for(seed, "verify/solver");
    let mut failures = Vec::new();
    let mut max_gap: f64 = 0.0;
    for k in 0..instances {
        let p = random_instance(&mut rng, 8, 3);
        let greedy = solve_assignments(&p);
        let oracle = brute_force_oracle(&p);
        match (greedy, oracle) {
            (Ok(g), Ok(o)) => {
                let gap = (g.objective - o.objective).abs();
                max_gap = max_gap.max(gap);
                if gap > 1e-6 {
                    failures.push(format!(
                        "instance {k}: greedy {} vs oracle {}",
                        g.objective, o.objective
                    ));
                }
                if let Err(e) = g.assignment.check(&p.constraints, 1e-9) {
                    failures.push(format!("instance {k}: greedy matrix {e}"));
                }
                let theta = p.theta();
                if (g.assignment.objective(&p.losses, &theta) - g.objective).abs() > 1e-8 {
                    failures.push(format!("instance {k}: objective not reproducible"));
                }
            }
            (g, o) => failures.push(format!("instance {k}: greedy {g:?}, oracle {o:?}")),
        }
    }
    SolverReport {
        instances,
        max_objective_gap: max_gap,
        passed: failures.is_empty(),
        failures,
    }
}

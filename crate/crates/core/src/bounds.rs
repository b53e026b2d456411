//! Concentration bounds on the marginal constraint set, their Monte Carlo
//! checks, and the upper-bound property of the worst-off objective.
//!
//! Coverage is checked per group coordinate. The joint frequency over all
//! groups is reported alongside but not compared with the per-coordinate
//! bound, which does not include a union over groups.

use rand::Rng;
use rand_distr::{Binomial, Distribution, Hypergeometric};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment::{solve_assignments, ConstraintSpec, SolveProblem};
use crate::group_weights::GroupWeights;
use crate::seed::rng_for;

/// `1 - 2 exp(-2 n eps^2)`; negative when vacuous.
pub fn bound_true_marginal(n: u64, eps: f64) -> f64 {
    1.0 - 2.0 * (-2.0 * n as f64 * eps * eps).exp()
}

/// `1 - 2 exp(-2 n eps^2) - 2 exp(-2 k delta^2)`; negative when vacuous.
pub fn bound_estimated_marginal(n: u64, k: u64, eps: f64, delta: f64) -> f64 {
    bound_true_marginal(n, eps) - 2.0 * (-2.0 * k as f64 * delta * delta).exp()
}

/// How the labeled sample behind an estimated marginal relates to the
/// training sample.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabeledSampling {
    /// `k` fresh draws from `p*`.
    #[default]
    Independent,
    /// `k` rows drawn without replacement from the `n` training rows
    /// (requires `k <= n`).
    SubsetOfUnlabeled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub per_group_frequency: Vec<f64>,
    pub joint_frequency: f64,
    pub analytic_bound: f64,
    pub trials: u64,
}

impl CoverageReport {
    /// Three standard deviations of a frequency estimate at worst-case variance.
    pub fn mc_tolerance(&self) -> f64 {
        3.0 * (0.25 / self.trials as f64).sqrt()
    }

    /// Every per-group frequency is at least the bound, up to Monte Carlo error.
    pub fn respects_bound(&self) -> bool {
        self.analytic_bound <= 0.0
            || self
                .per_group_frequency
                .iter()
                .all(|f| *f >= self.analytic_bound - self.mc_tolerance())
    }
}

fn multinomial<R: Rng>(rng: &mut R, n: u64, p: &[f64]) -> Vec<u64> {
    let mut out = Vec::with_capacity(p.len());
    let mut left = n;
    let mut mass = 1.0;
    for (j, pj) in p.iter().enumerate() {
        if j + 1 == p.len() {
            out.push(left);
            break;
        }
        let c = if left == 0 || mass <= 0.0 {
            0
        } else {
            let prob = (pj / mass).clamp(0.0, 1.0);
            Binomial::new(left, prob).expect("probability clamped").sample(rng)
        };
        out.push(c);
        left -= c;
        mass -= pj;
    }
    out
}

/// Draw `k` of the rows with group counts `counts`, without replacement.
fn subsample<R: Rng>(rng: &mut R, counts: &[u64], k: u64) -> Vec<u64> {
    let mut out = Vec::with_capacity(counts.len());
    let mut pop: u64 = counts.iter().sum();
    let mut left = k;
    for (j, c) in counts.iter().enumerate() {
        if j + 1 == counts.len() {
            out.push(left);
            break;
        }
        let x = if left == 0 {
            0
        } else {
            Hypergeometric::new(pop, *c, left).expect("valid counts").sample(rng)
        };
        out.push(x);
        pop -= c;
        left -= x;
    }
    out
}

const SHARD: u64 = 1000;

/// Count per-group and joint hits over `trials`, sharded across threads.
/// Shard `s` uses its own seed derived from `seed`; sums make the result
/// independent of scheduling.
fn run_trials<F>(m: usize, trials: u64, seed: u64, label: &str, hit: F) -> (Vec<u64>, u64)
where
    F: Fn(&mut rand_chacha::ChaCha8Rng) -> Vec<bool> + Sync,
{
    let shards = trials.div_ceil(SHARD);
    (0..shards)
        .into_par_iter()
        .map(|s| {
            let mut rng = rng_for(seed, &format!("{label}/shard/{s}"));
            let len = SHARD.min(trials - s * SHARD);
            let mut per = vec![0u64; m];
            let mut joint = 0u64;
            for _ in 0..len {
                let h = hit(&mut rng);
                for (c, b) in per.iter_mut().zip(&h) {
                    *c += u64::from(*b);
                }
                joint += u64::from(h.iter().all(|b| *b));
            }
            (per, joint)
        })
        .reduce(
            || (vec![0; m], 0),
            |(mut a, ja), (b, jb)| {
                for (x, y) in a.iter_mut().zip(&b) {
                    *x += y;
                }
                (a, ja + jb)
            },
        )
}

fn check_inputs(p_star: &[f64], n: u64, trials: u64) {
    assert!(!p_star.is_empty() && p_star.iter().all(|p| *p >= 0.0), "p* must be nonnegative");
    assert!((p_star.iter().sum::<f64>() - 1.0).abs() <= 1e-9, "p* must sum to 1");
    assert!(n >= 1, "n must be positive");
    assert!(trials >= 1, "need at least one trial");
}

fn report(per: Vec<u64>, joint: u64, trials: u64, bound: f64) -> CoverageReport {
    CoverageReport {
        per_group_frequency: per.iter().map(|c| *c as f64 / trials as f64).collect(),
        joint_frequency: joint as f64 / trials as f64,
        analytic_bound: bound,
        trials,
    }
}

/// Frequency with which `n` draws from `p*` have every empirical group
/// frequency within `eps` of `p*`.
pub fn monte_carlo_coverage(p_star: &[f64], n: u64, eps: f64, trials: u64, seed: u64) -> CoverageReport {
    check_inputs(p_star, n, trials);
    let (per, joint) = run_trials(p_star.len(), trials, seed, "mc/true", |rng| {
        multinomial(rng, n, p_star)
            .iter()
            .zip(p_star)
            .map(|(c, p)| (*c as f64 / n as f64 - p).abs() <= eps)
            .collect()
    });
    report(per, joint, trials, bound_true_marginal(n, eps))
}

/// Frequency with which the training frequencies of `n` draws lie within
/// `eps + delta` of the marginal estimated from `k` labeled draws.
pub fn monte_carlo_coverage_estimated(
    p_star: &[f64],
    n: u64,
    k: u64,
    eps: f64,
    delta: f64,
    trials: u64,
    seed: u64,
    sampling: LabeledSampling,
) -> CoverageReport {
    check_inputs(p_star, n, trials);
    assert!(k >= 1, "k must be positive");
    if sampling == LabeledSampling::SubsetOfUnlabeled {
        assert!(k <= n, "a labeled subset cannot exceed the training sample");
    }
    let (per, joint) = run_trials(p_star.len(), trials, seed, "mc/estimated", |rng| {
        let counts = multinomial(rng, n, p_star);
        let labeled = match sampling {
            LabeledSampling::Independent => multinomial(rng, k, p_star),
            LabeledSampling::SubsetOfUnlabeled => subsample(rng, &counts, k),
        };
        counts
            .iter()
            .zip(&labeled)
            .map(|(c, l)| (*c as f64 / n as f64 - *l as f64 / k as f64).abs() <= eps + delta)
            .collect()
    });
    report(per, joint, trials, bound_estimated_marginal(n, k, eps, delta))
}

/// One cell of the coverage grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageCell {
    pub n: u64,
    pub eps: f64,
    /// `None` for the true-marginal case.
    pub k: Option<u64>,
    pub delta: Option<f64>,
    pub report: CoverageReport,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageGrid {
    pub p_star: Vec<f64>,
    pub cells: Vec<CoverageCell>,
    pub passed: bool,
}

pub const DEFAULT_P_STAR: [f64; 3] = [0.5, 0.3, 0.2];
pub const GRID_N: [u64; 3] = [100, 1000, 10_000];
pub const GRID_EPS: [f64; 3] = [0.02, 0.05, 0.1];
pub const GRID_K: [u64; 2] = [50, 500];
pub const GRID_DELTA: [f64; 2] = [0.05, 0.1];

/// Both bounds over `GRID_N x GRID_EPS` (and `GRID_K x GRID_DELTA` for the
/// estimated marginal).
pub fn verify_coverage_grid(p_star: &[f64], trials: u64, seed: u64) -> CoverageGrid {
    let mut cells = Vec::new();
    for &n in &GRID_N {
        for &eps in &GRID_EPS {
            let report = monte_carlo_coverage(p_star, n, eps, trials, seed);
            cells.push(CoverageCell { n, eps, k: None, delta: None, passed: report.respects_bound(), report });
            for &k in &GRID_K {
                for &delta in &GRID_DELTA {
                    let report = monte_carlo_coverage_estimated(
                        p_star, n, k, eps, delta, trials, seed, LabeledSampling::Independent,
                    );
                    cells.push(CoverageCell { n, eps, k: Some(k), delta: Some(delta), passed: report.respects_bound(), report });
                }
            }
        }
    }
    let passed = cells.iter().all(|c| c.passed);
    CoverageGrid { p_star: p_star.to_vec(), cells, passed }
}

/// A failed upper-bound instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpperBoundCounterexample {
    pub losses: Vec<f64>,
    pub q: Vec<f64>,
    pub groups: Vec<usize>,
    pub solver_objective: f64,
    pub group_dro_objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpperBoundReport {
    pub instances: usize,
    /// Smallest `solver - group DRO` gap seen.
    pub min_gap: f64,
    pub counterexamples: Vec<UpperBoundCounterexample>,
    pub passed: bool,
}

/// `sum_j q_j * mean loss of group j` under hard labels.
pub fn group_dro_objective(losses: &[f64], groups: &[usize], q: &[f64]) -> f64 {
    let m = q.len();
    let mut sum = vec![0.0; m];
    let mut cnt = vec![0usize; m];
    for (l, g) in losses.iter().zip(groups) {
        sum[*g] += l;
        cnt[*g] += 1;
    }
    (0..m)
        .filter(|&j| cnt[j] > 0)
        .map(|j| q[j] * sum[j] / cnt[j] as f64)
        .sum()
}

/// Random small instances whose marginals equal the ground-truth group
/// frequencies, solved at zero slack with a random subset of rows pinned
/// to their true group. The solver optimum must dominate the group DRO
/// objective of the ground truth.
pub fn verify_upper_bound(instances: usize, seed: u64) -> UpperBoundReport {
    assert!(instances >= 1, "need at least one instance");
    let mut rng = rng_for(seed, "verify/upper_bound");
    let mut counterexamples = Vec::new();
    let mut min_gap = f64::INFINITY;
    for _ in 0..instances {
        let m = rng.random_range(1..=3usize);
        let n = rng.random_range(m..=8usize);
        // Every group gets at least one row.
        let mut groups: Vec<usize> = (0..m).collect();
        groups.extend((m..n).map(|_| rng.random_range(0..m)));
        for i in (1..n).rev() {
            groups.swap(i, rng.random_range(0..=i));
        }
        let losses: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..4.0)).collect();
        let q = GroupWeights::from_unnormalized(
            &(0..m).map(|_| rng.random_range(0.05..1.0)).collect::<Vec<f64>>(),
        )
        .expect("positive weights");
        let mut counts = vec![0usize; m];
        for g in &groups {
            counts[*g] += 1;
        }
        let p_bar: Vec<f64> = counts.iter().map(|c| *c as f64 / n as f64).collect();
        let pins: Vec<(usize, usize)> = (0..n)
            .filter(|_| rng.random_bool(0.4))
            .map(|i| (i, groups[i]))
            .collect();
        let problem = SolveProblem::new(losses.clone(), q.clone(), ConstraintSpec::new(p_bar, 0.0, pins));
        let gdro = group_dro_objective(&losses, &groups, q.as_slice());
        let solved = solve_assignments(&problem).map(|s| s.objective);
        let ok = matches!(solved, Ok(s) if s >= gdro - 1e-8);
        let s = solved.unwrap_or(f64::NEG_INFINITY);
        min_gap = min_gap.min(s - gdro);
        if !ok {
            counterexamples.push(UpperBoundCounterexample {
                losses,
                q: q.as_slice().to_vec(),
                groups,
                solver_objective: s,
                group_dro_objective: gdro,
            });
        }
    }
    UpperBoundReport {
        instances,
        min_gap,
        passed: counterexamples.is_empty(),
        counterexamples,
    }
}

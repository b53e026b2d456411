//! Dense two-phase tableau simplex with Bland's rule.
//!
//! Only meant for the tiny instances the brute-force oracle handles; no
//! attempt at sparsity or numerical refinement.

const PIVOT_TOL: f64 = 1e-11;
const FEAS_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Relation {
    Le,
    Ge,
    Eq,
}

#[derive(Debug, Clone)]
pub(crate) struct Constraint {
    pub coeffs: Vec<f64>,
    pub relation: Relation,
    pub rhs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum LpOutcome {
    Optimal { x: Vec<f64>, value: f64 },
    Infeasible,
    Unbounded,
}

struct Tableau {
    /// `rows x (cols + 1)`, last column is the right-hand side.
    t: Vec<Vec<f64>>,
    basis: Vec<usize>,
    cols: usize,
}

impl Tableau {
    fn rhs(&self, i: usize) -> f64 {
        self.t[i][self.cols]
    }

    fn pivot(&mut self, row: usize, col: usize) {
        let p = self.t[row][col];
        for v in &mut self.t[row] {
            *v /= p;
        }
        let pivot_row = self.t[row].clone();
        for (i, r) in self.t.iter_mut().enumerate() {
            if i == row {
                continue;
            }
            let f = r[col];
            if f != 0.0 {
                for (v, pv) in r.iter_mut().zip(&pivot_row) {
                    *v -= f * pv;
                }
            }
        }
        self.basis[row] = col;
    }

    /// Maximize `cost . x` over the current basis, entering only columns
    /// flagged in `allowed`. Returns `false` on unboundedness.
    fn optimize(&mut self, cost: &[f64], allowed: &[bool]) -> bool {
        loop {
            let entering = (0..self.cols).find(|&k| {
                allowed[k] && !self.basis.contains(&k) && {
                    let reduced = cost[k]
                        - self
                            .basis
                            .iter()
                            .enumerate()
                            .map(|(i, &b)| cost[b] * self.t[i][k])
                            .sum::<f64>();
                    reduced > PIVOT_TOL
                }
            });
            let Some(k) = entering else { return true };
            let mut leave: Option<(usize, f64)> = None;
            for i in 0..self.t.len() {
                let a = self.t[i][k];
                if a > PIVOT_TOL {
                    let ratio = self.rhs(i) / a;
                    leave = match leave {
                        None => Some((i, ratio)),
                        Some((li, lr)) => {
                            if ratio < lr - 1e-14
                                || (ratio <= lr + 1e-14 && self.basis[i] < self.basis[li])
                            {
                                Some((i, ratio))
                            } else {
                                Some((li, lr))
                            }
                        }
                    };
                }
            }
            let Some((row, _)) = leave else { return false };
            self.pivot(row, k);
        }
    }
}

/// Maximize `objective . x` subject to `constraints` and `x >= 0`.
pub(crate) fn maximize(objective: &[f64], constraints: &[Constraint]) -> LpOutcome {
    let n = objective.len();
    let m = constraints.len();
    let n_slack = constraints
        .iter()
        .filter(|c| c.relation != Relation::Eq)
        .count();
    let cols = n + n_slack + m;
    let art0 = n + n_slack;

    let mut t = Vec::with_capacity(m);
    let mut slack = n;
    for (i, c) in constraints.iter().enumerate() {
        debug_assert_eq!(c.coeffs.len(), n);
        let mut row = vec![0.0; cols + 1];
        row[..n].copy_from_slice(&c.coeffs);
        match c.relation {
            Relation::Le => {
                row[slack] = 1.0;
                slack += 1;
            }
            Relation::Ge => {
                row[slack] = -1.0;
                slack += 1;
            }
            Relation::Eq => {}
        }
        row[cols] = c.rhs;
        if c.rhs < 0.0 {
            for v in &mut row {
                *v = -*v;
            }
        }
        row[art0 + i] = 1.0;
        t.push(row);
    }
    let mut tab = Tableau {
        t,
        basis: (art0..art0 + m).collect(),
        cols,
    };

    // Phase one: drive the artificial variables to zero.
    let mut phase1 = vec![0.0; cols];
    for c in &mut phase1[art0..] {
        *c = -1.0;
    }
    let all = vec![true; cols];
    tab.optimize(&phase1, &all);
    let infeas: f64 = (0..m)
        .filter(|&i| tab.basis[i] >= art0)
        .map(|i| tab.rhs(i))
        .sum();
    if infeas > FEAS_TOL {
        return LpOutcome::Infeasible;
    }
    for i in 0..m {
        if tab.basis[i] >= art0 {
            if let Some(k) = (0..art0).find(|&k| tab.t[i][k].abs() > 1e-9) {
                tab.pivot(i, k);
            }
            // Otherwise the row is redundant; the artificial stays basic at 0.
        }
    }

    let mut phase2 = vec![0.0; cols];
    phase2[..n].copy_from_slice(objective);
    let allowed: Vec<bool> = (0..cols).map(|k| k < art0).collect();
    if !tab.optimize(&phase2, &allowed) {
        return LpOutcome::Unbounded;
    }
    let mut x = vec![0.0; n];
    for (i, &b) in tab.basis.iter().enumerate() {
        if b < n {
            x[b] = tab.rhs(i).max(0.0);
        }
    }
    let value = x.iter().zip(objective).map(|(a, b)| a * b).sum();
    LpOutcome::Optimal { x, value }
}

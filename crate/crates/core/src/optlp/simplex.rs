//! Dense two-phase tableau simplex for `min cᵀx s.t. Ax = b, x ≥ 0`.
//!
//! Pricing is Dantzig's most-negative reduced cost; after a run of
//! degenerate pivots the solver falls back to Bland's smallest-index rule,
//! which cannot cycle, until the objective moves again.

use log::trace;

/// Equality-form linear program. Rows of `a` all have length `c.len()`.
#[derive(Debug, Clone)]
pub struct StandardLp {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimplexStatus {
    Optimal,
    Infeasible,
    Unbounded,
    IterationLimit,
}

#[derive(Debug, Clone)]
pub struct SimplexResult {
    pub status: SimplexStatus,
    pub x: Vec<f64>,
    pub objective: f64,
    /// Row duals of the phase that finished: phase-2 duals when optimal,
    /// phase-1 (feasibility) duals when infeasible.
    pub duals: Vec<f64>,
    /// Phase-1 objective: total artificial mass left.
    pub infeasibility: f64,
    /// `max_r |(Ax − b)_r|` of the returned point.
    pub residual: f64,
    pub iterations: usize,
}

pub const PIVOT_TOL: f64 = 1e-11;
pub const OPT_TOL: f64 = 1e-11;
pub const FEAS_TOL: f64 = 1e-8;
const DEGENERATE_RUN: usize = 50;
const REFACTOR_PERIOD: usize = 64;

struct Tableau {
    /// `rows × (cols + 1)`; the last entry of each row is the rhs.
    t: Vec<Vec<f64>>,
    /// Reduced costs for every column, and `-objective` in the last slot.
    d: Vec<f64>,
    basis: Vec<usize>,
    cols: usize,
    /// Columns allowed to enter the basis.
    enterable: Vec<bool>,
    /// The starting tableau rows, kept for refactorization.
    orig: Vec<Vec<f64>>,
    cost: Vec<f64>,
    /// `OPT_TOL` scaled by the largest cost magnitude.
    opt_tol: f64,
}

impl Tableau {
    fn rhs(&self, r: usize) -> f64 {
        self.t[r][self.cols]
    }

    /// Recomputes the tableau as `B⁻¹·[A | b]` from the original rows,
    /// discarding error accumulated over many pivots. Leaves the tableau as
    /// it was if the basis matrix is numerically singular.
    fn refactor(&mut self) {
        let m = self.t.len();
        let w = self.cols + 1;
        let mut aug: Vec<Vec<f64>> = (0..m)
            .map(|r| {
                let mut row: Vec<f64> = self.basis.iter().map(|&j| self.orig[r][j]).collect();
                row.extend_from_slice(&self.orig[r]);
                row
            })
            .collect();
        for c in 0..m {
            let piv = (c..m).max_by(|&a, &b| aug[a][c].abs().total_cmp(&aug[b][c].abs())).expect("non-empty");
            if aug[piv][c].abs() < 1e-13 {
                return;
            }
            aug.swap(c, piv);
            let p = aug[c][c];
            aug[c].iter_mut().for_each(|v| *v /= p);
            let prow = aug[c].clone();
            for (r, row) in aug.iter_mut().enumerate() {
                if r != c {
                    let f = row[c];
                    if f != 0.0 {
                        row.iter_mut().zip(&prow).for_each(|(v, q)| *v -= f * q);
                    }
                }
            }
        }
        for (r, row) in aug.into_iter().enumerate() {
            let mut t = row[m..m + w].to_vec();
            t[self.basis[r]] = 1.0;
            self.t[r] = t;
        }
        // Exact zeros in other basic columns.
        for r in 0..m {
            for (q, &j) in self.basis.iter().enumerate() {
                if q != r {
                    self.t[r][j] = 0.0;
                }
            }
        }
        let cost = self.cost.clone();
        self.set_costs(&cost);
    }

    fn set_costs(&mut self, cost: &[f64]) {
        self.cost = cost.to_vec();
        self.opt_tol = OPT_TOL * cost.iter().fold(1.0, |m, c| f64::max(m, c.abs()));
        let m = self.t.len();
        let mut d = cost.to_vec();
        d.push(0.0);
        for r in 0..m {
            let cb = cost[self.basis[r]];
            if cb != 0.0 {
                for (dj, tj) in d.iter_mut().zip(&self.t[r]) {
                    *dj -= cb * tj;
                }
            }
        }
        self.d = d;
    }

    fn pivot(&mut self, r: usize, j: usize) {
        let w = self.cols + 1;
        let p = self.t[r][j];
        {
            let row = &mut self.t[r];
            for v in row.iter_mut() {
                *v /= p;
            }
            row[j] = 1.0;
        }
        let pivot_row = self.t[r].clone();
        for (i, row) in self.t.iter_mut().enumerate() {
            if i == r {
                continue;
            }
            let f = row[j];
            if f != 0.0 {
                for k in 0..w {
                    row[k] -= f * pivot_row[k];
                }
                row[j] = 0.0;
            }
        }
        let f = self.d[j];
        if f != 0.0 {
            for k in 0..w {
                self.d[k] -= f * pivot_row[k];
            }
            self.d[j] = 0.0;
        }
        self.basis[r] = j;
    }

    fn choose_entering(&self, bland: bool) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for j in 0..self.cols {
            if !self.enterable[j] || self.d[j] >= -self.opt_tol {
                continue;
            }
            if bland {
                return Some(j);
            }
            if best.map_or(true, |(_, v)| self.d[j] < v) {
                best = Some((j, self.d[j]));
            }
        }
        best.map(|(j, _)| j)
    }

    fn choose_leaving(&self, j: usize) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for r in 0..self.t.len() {
            let a = self.t[r][j];
            if a > PIVOT_TOL {
                let ratio = self.rhs(r).max(0.0) / a;
                match best {
                    None => best = Some((r, ratio)),
                    Some((br, bv)) => {
                        let tie = (ratio - bv).abs() <= 1e-12 * (1.0 + bv.abs());
                        if ratio < bv && !tie || tie && self.basis[r] < self.basis[br] {
                            best = Some((r, ratio));
                        }
                    }
                }
            }
        }
        best.map(|(r, _)| r)
    }

    /// Runs pivots to optimality for the current cost row.
    fn optimize(&mut self, iters: &mut usize, max_iters: usize) -> SimplexStatus {
        let mut bland = false;
        let mut stalled = 0usize;
        let period = REFACTOR_PERIOD.max(self.t.len());
        let mut since_refactor = 0usize;
        let mut last_obj = self.d[self.cols];
        loop {
            let Some(j) = self.choose_entering(bland) else {
                if since_refactor > 0 {
                    // Confirm optimality on a freshly factored tableau.
                    self.refactor();
                    since_refactor = 0;
                    continue;
                }
                return SimplexStatus::Optimal;
            };
            let Some(r) = self.choose_leaving(j) else {
                return SimplexStatus::Unbounded;
            };
            if *iters >= max_iters {
                return SimplexStatus::IterationLimit;
            }
            self.pivot(r, j);
            *iters += 1;
            since_refactor += 1;
            if since_refactor >= period {
                self.refactor();
                since_refactor = 0;
            }
            let obj = self.d[self.cols];
            if (obj - last_obj).abs() <= 1e-14 * (1.0 + obj.abs()) {
                stalled += 1;
                if stalled >= DEGENERATE_RUN && !bland {
                    trace!("simplex: switching to Bland's rule after {stalled} degenerate pivots");
                    bland = true;
                }
            } else {
                stalled = 0;
                bland = false;
                last_obj = obj;
            }
        }
    }
}

/// Solves `lp`. Rows whose rhs is negative are negated internally; reported
/// duals refer to the original rows.
pub fn solve(lp: &StandardLp, max_iters: usize) -> SimplexResult {
    let m = lp.b.len();
    let n = lp.c.len();
    debug_assert!(lp.a.iter().all(|r| r.len() == n));

    let sign: Vec<f64> = lp.b.iter().map(|b| if *b < 0.0 { -1.0 } else { 1.0 }).collect();

    // Reuse existing unit columns as the starting basis where possible so
    // slack-heavy problems do not need an artificial per row.
    let mut init_col: Vec<Option<usize>> = vec![None; m];
    let mut col_used = vec![false; n];
    for j in 0..n {
        let mut hit = None;
        let mut unit = true;
        for r in 0..m {
            let v = lp.a[r][j] * sign[r];
            if v != 0.0 {
                if v == 1.0 && hit.is_none() {
                    hit = Some(r);
                } else {
                    unit = false;
                    break;
                }
            }
        }
        if let (true, Some(r)) = (unit, hit) {
            if init_col[r].is_none() && !col_used[j] {
                init_col[r] = Some(j);
                col_used[j] = true;
            }
        }
    }
    let art_rows: Vec<usize> = (0..m).filter(|r| init_col[*r].is_none()).collect();
    let n_art = art_rows.len();
    let cols = n + n_art;
    for (a, &r) in art_rows.iter().enumerate() {
        init_col[r] = Some(n + a);
    }
    let init_col: Vec<usize> = init_col.into_iter().map(|c| c.expect("assigned")).collect();

    let mut t = Vec::with_capacity(m);
    for r in 0..m {
        let mut row = Vec::with_capacity(cols + 1);
        row.extend(lp.a[r].iter().map(|v| v * sign[r]));
        row.resize(cols, 0.0);
        if init_col[r] >= n {
            row[init_col[r]] = 1.0;
        }
        row.push(lp.b[r] * sign[r]);
        t.push(row);
    }
    let mut enterable = vec![true; cols];
    let mut tab = Tableau {
        orig: t.clone(),
        t,
        d: vec![0.0; cols + 1],
        basis: init_col.clone(),
        cols,
        enterable: enterable.clone(),
        cost: vec![0.0; cols],
        opt_tol: OPT_TOL,
    };

    let mut iters = 0usize;
    let mut phase1_cost = vec![0.0; cols];
    for c in phase1_cost.iter_mut().skip(n) {
        *c = 1.0;
    }

    let duals_for = |tab: &Tableau, cost: &[f64]| -> Vec<f64> {
        (0..m).map(|r| sign[r] * (cost[init_col[r]] - tab.d[init_col[r]])).collect()
    };

    let mut infeasibility = 0.0;
    if n_art > 0 {
        tab.set_costs(&phase1_cost);
        let st = tab.optimize(&mut iters, max_iters);
        infeasibility = -tab.d[cols];
        if st == SimplexStatus::IterationLimit {
            return finish(
                &tab,
                n,
                SimplexStatus::IterationLimit,
                lp,
                duals_for(&tab, &phase1_cost),
                infeasibility,
                iters,
            );
        }
        if infeasibility > FEAS_TOL {
            return finish(&tab, n, SimplexStatus::Infeasible, lp, duals_for(&tab, &phase1_cost), infeasibility, iters);
        }
        // Drive zero-level artificials out of the basis where a structural
        // column can replace them; rows where none can are redundant.
        for r in 0..m {
            if tab.basis[r] >= n {
                if let Some(j) = (0..n).find(|&j| tab.t[r][j].abs() > 1e-9) {
                    tab.pivot(r, j);
                    iters += 1;
                }
            }
        }
        for e in enterable.iter_mut().skip(n) {
            *e = false;
        }
        tab.enterable = enterable;
    }

    let mut cost = lp.c.clone();
    cost.resize(cols, 0.0);
    tab.set_costs(&cost);
    let st = tab.optimize(&mut iters, max_iters);
    let duals = duals_for(&tab, &cost);
    finish(&tab, n, st, lp, duals, infeasibility, iters)
}

fn finish(
    tab: &Tableau,
    n: usize,
    status: SimplexStatus,
    lp: &StandardLp,
    duals: Vec<f64>,
    infeasibility: f64,
    iterations: usize,
) -> SimplexResult {
    let mut x = vec![0.0; n];
    for (r, &j) in tab.basis.iter().enumerate() {
        if j < n {
            x[j] = tab.rhs(r).max(0.0);
        }
    }
    let objective = x.iter().zip(&lp.c).map(|(a, b)| a * b).sum();
    let residual =
        lp.a.iter()
            .zip(&lp.b)
            .map(|(row, b)| (row.iter().zip(&x).map(|(a, v)| a * v).sum::<f64>() - b).abs())
            .fold(0.0, f64::max);
    SimplexResult { status, x, objective, duals, infeasibility, residual, iterations }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn min_x_at_least_three() {
        // min x s.t. x - s = 3
        let lp = StandardLp { a: vec![vec![1.0, -1.0]], b: vec![3.0], c: vec![1.0, 0.0] };
        let r = solve(&lp, 100);
        assert_eq!(r.status, SimplexStatus::Optimal);
        assert!((r.objective - 3.0).abs() < 1e-12);
        assert!((r.duals[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn textbook_problem() {
        // max 3x + 5y s.t. x <= 4, 2y <= 12, 3x + 2y <= 18  -> (2, 6), 36
        let lp = StandardLp {
            a: vec![vec![1.0, 0.0, 1.0, 0.0, 0.0], vec![0.0, 2.0, 0.0, 1.0, 0.0], vec![3.0, 2.0, 0.0, 0.0, 1.0]],
            b: vec![4.0, 12.0, 18.0],
            c: vec![-3.0, -5.0, 0.0, 0.0, 0.0],
        };
        let r = solve(&lp, 100);
        assert_eq!(r.status, SimplexStatus::Optimal);
        assert!((r.x[0] - 2.0).abs() < 1e-12 && (r.x[1] - 6.0).abs() < 1e-12);
        assert!((r.objective + 36.0).abs() < 1e-12);
        // strong duality: bᵀy = cᵀx
        let by: f64 = lp.b.iter().zip(&r.duals).map(|(a, b)| a * b).sum();
        assert!((by - r.objective).abs() < 1e-10);
    }

    #[test]
    fn infeasible_and_unbounded() {
        // x + y = -1 with x, y >= 0
        let lp = StandardLp { a: vec![vec![1.0, 1.0]], b: vec![-1.0], c: vec![0.0, 0.0] };
        assert_eq!(solve(&lp, 100).status, SimplexStatus::Infeasible);
        // min -x s.t. x - y = 0
        let lp = StandardLp { a: vec![vec![1.0, -1.0]], b: vec![0.0], c: vec![-1.0, 0.0] };
        assert_eq!(solve(&lp, 100).status, SimplexStatus::Unbounded);
    }

    #[test]
    fn redundant_rows_are_tolerated() {
        let lp = StandardLp { a: vec![vec![1.0, 1.0], vec![2.0, 2.0]], b: vec![1.0, 2.0], c: vec![1.0, 2.0] };
        let r = solve(&lp, 100);
        assert_eq!(r.status, SimplexStatus::Optimal);
        assert!((r.objective - 1.0).abs() < 1e-12);
    }

    #[test]
    fn iteration_limit_reported() {
        let lp = StandardLp {
            a: vec![vec![2.0, 0.0, 1.0, 0.0], vec![0.0, 2.0, 0.0, 1.0]],
            b: vec![1.0, 1.0],
            c: vec![-1.0, -1.0, 0.0, 0.0],
        };
        assert_eq!(solve(&lp, 1).status, SimplexStatus::IterationLimit);
    }

    #[test]
    fn degenerate_cycling_example_terminates() {
        // Beale's classic cycling instance (in ≤ form with slacks).
        let lp = StandardLp {
            a: vec![
                vec![0.25, -60.0, -0.04, 9.0, 1.0, 0.0, 0.0],
                vec![0.5, -90.0, -0.02, 3.0, 0.0, 1.0, 0.0],
                vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            ],
            b: vec![0.0, 0.0, 1.0],
            c: vec![-0.75, 150.0, -0.02, 6.0, 0.0, 0.0, 0.0],
        };
        let r = solve(&lp, 10_000);
        assert_eq!(r.status, SimplexStatus::Optimal);
        assert!((r.objective + 0.05).abs() < 1e-10, "{}", r.objective);
    }
}

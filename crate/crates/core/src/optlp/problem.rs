//! The unbiased-randomizer LP in explicit dense form.
//!
//! Variables are the matrix entries `M[y][i]` followed by one auxiliary
//! column minimum `m_i` per output. The pairwise DP constraints
//! `M[y'][i] <= e^ε M[y][i]` are encoded as `m_i <= M[y][i] <= e^ε m_i`,
//! which is equivalent and needs `2k` rows per column instead of `k(k-1)`.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::labels::{OutputGrid, Prior};
use crate::loss::LossKind;

use super::simplex::{self, SimplexStatus, StandardLp};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarRole {
    /// `M[y][i]` by label and output index.
    Entry { y: usize, i: usize },
    /// Column minimum `m_i`.
    ColumnMin { i: usize },
}

/// `min objective·x  s.t.  eq_matrix·x = eq_rhs,  le_matrix·x <= le_rhs,  x >= 0`.
#[derive(Debug, Clone)]
pub struct LpProblem {
    pub objective: Vec<f64>,
    pub eq_matrix: Vec<Vec<f64>>,
    pub eq_rhs: Vec<f64>,
    pub le_matrix: Vec<Vec<f64>>,
    pub le_rhs: Vec<f64>,
    pub vars: Vec<VarRole>,
    pub labels: usize,
    pub outputs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
    IterationLimit,
}

#[derive(Debug, Clone)]
pub struct LpSolution {
    pub status: LpStatus,
    pub values: Vec<f64>,
    pub objective_value: f64,
    /// Largest constraint violation of `values`, re-measured after the solve.
    pub max_violation: f64,
    pub iterations: usize,
}

impl LpProblem {
    pub fn var_count(&self) -> usize {
        self.objective.len()
    }

    pub fn entry_index(&self, y: usize, i: usize) -> usize {
        y * self.outputs + i
    }

    pub fn column_min_index(&self, i: usize) -> usize {
        self.labels * self.outputs + i
    }

    /// Largest violation of any constraint (including `x >= 0`) at `x`.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let dot = |row: &[f64]| row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        let eq = self.eq_matrix.iter().zip(&self.eq_rhs).map(|(r, b)| (dot(r) - b).abs());
        let le = self.le_matrix.iter().zip(&self.le_rhs).map(|(r, b)| (dot(r) - b).max(0.0));
        let nn = x.iter().map(|v| (-v).max(0.0));
        eq.chain(le).chain(nn).fold(0.0, f64::max)
    }

    /// Plain-text standard form, one constraint per line, for cross-checking
    /// with external solvers.
    pub fn dump(&self) -> String {
        let name = |j: usize| match self.vars[j] {
            VarRole::Entry { y, i } => format!("M_{y}_{i}"),
            VarRole::ColumnMin { i } => format!("m_{i}"),
        };
        let expr = |row: &[f64]| {
            let mut s = String::new();
            for (j, a) in row.iter().enumerate().filter(|(_, a)| **a != 0.0) {
                let _ = write!(s, " {:+e} {}", a, name(j));
            }
            if s.is_empty() {
                s.push_str(" 0");
            }
            s
        };
        let mut out = String::from("minimize\n");
        let _ = writeln!(out, "  obj:{}", expr(&self.objective));
        out.push_str("subject to\n");
        for (r, (row, b)) in self.eq_matrix.iter().zip(&self.eq_rhs).enumerate() {
            let _ = writeln!(out, "  e{r}:{} = {:e}", expr(row), b);
        }
        for (r, (row, b)) in self.le_matrix.iter().zip(&self.le_rhs).enumerate() {
            let _ = writeln!(out, "  l{r}:{} <= {:e}", expr(row), b);
        }
        out.push_str("end\n");
        out
    }
}

/// Builds the LP whose optimum is the best unbiased ε-DP randomizer from
/// `prior.labels()` onto `grid`.
pub fn build_lp(prior: &Prior, grid: &OutputGrid, epsilon: f64, loss: LossKind) -> Result<LpProblem> {
    if loss != LossKind::Squared {
        return Err(Error::Parameter("the randomizer LP is only defined for squared loss".into()));
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::Parameter(format!("epsilon must be positive, got {epsilon}")));
    }
    let ys = prior.labels().values();
    let outs = grid.values();
    let (k, n) = (ys.len(), outs.len());
    let nv = k * n + n;
    let e = epsilon.exp();

    let mut vars = Vec::with_capacity(nv);
    let mut objective = vec![0.0; nv];
    for (y, yv) in ys.iter().enumerate() {
        for (i, ov) in outs.iter().enumerate() {
            vars.push(VarRole::Entry { y, i });
            objective[y * n + i] = prior.probs()[y] * loss.value(*ov, *yv)?;
        }
    }
    vars.extend((0..n).map(|i| VarRole::ColumnMin { i }));

    let mut eq_matrix = Vec::with_capacity(2 * k);
    let mut eq_rhs = Vec::with_capacity(2 * k);
    for y in 0..k {
        let mut row = vec![0.0; nv];
        row[y * n..(y + 1) * n].iter_mut().for_each(|v| *v = 1.0);
        eq_matrix.push(row);
        eq_rhs.push(1.0);
    }
    for (y, yv) in ys.iter().enumerate() {
        let mut row = vec![0.0; nv];
        row[y * n..(y + 1) * n].copy_from_slice(outs);
        eq_matrix.push(row);
        eq_rhs.push(*yv);
    }

    let mut le_matrix = Vec::with_capacity(2 * k * n);
    for i in 0..n {
        for y in 0..k {
            // m_i - M[y][i] <= 0
            let mut lo = vec![0.0; nv];
            lo[k * n + i] = 1.0;
            lo[y * n + i] = -1.0;
            le_matrix.push(lo);
            // M[y][i] - e^ε m_i <= 0
            let mut hi = vec![0.0; nv];
            hi[y * n + i] = 1.0;
            hi[k * n + i] = -e;
            le_matrix.push(hi);
        }
    }
    let le_rhs = vec![0.0; le_matrix.len()];
    Ok(LpProblem { objective, eq_matrix, eq_rhs, le_matrix, le_rhs, vars, labels: k, outputs: n })
}

/// Solves an [`LpProblem`] with the dense two-phase simplex.
pub fn solve_lp(problem: &LpProblem, max_iters: usize) -> LpSolution {
    let n = problem.var_count();
    let n_le = problem.le_rhs.len();
    let width = n + n_le;
    let mut a = Vec::with_capacity(problem.eq_rhs.len() + n_le);
    let mut b = Vec::with_capacity(a.capacity());
    for (row, rhs) in problem.eq_matrix.iter().zip(&problem.eq_rhs) {
        let mut r = row.clone();
        r.resize(width, 0.0);
        a.push(r);
        b.push(*rhs);
    }
    for (s, (row, rhs)) in problem.le_matrix.iter().zip(&problem.le_rhs).enumerate() {
        let mut r = row.clone();
        r.resize(width, 0.0);
        r[n + s] = 1.0;
        a.push(r);
        b.push(*rhs);
    }
    let mut c = problem.objective.clone();
    c.resize(width, 0.0);
    let res = simplex::solve(&StandardLp { a, b, c }, max_iters);
    let values = res.x[..n].to_vec();
    let status = match res.status {
        SimplexStatus::Optimal => LpStatus::Optimal,
        SimplexStatus::Infeasible => LpStatus::Infeasible,
        SimplexStatus::Unbounded => LpStatus::Unbounded,
        SimplexStatus::IterationLimit => LpStatus::IterationLimit,
    };
    let max_violation = problem.max_violation(&values);
    if status == LpStatus::Optimal && max_violation > 1e-9 {
        log::warn!("dense simplex returned a point violating constraints by {max_violation:.3e}");
    }
    LpSolution { status, objective_value: res.objective, values, max_violation, iterations: res.iterations }
}

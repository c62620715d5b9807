//! Column generation over staircase columns.
//!
//! A column of an ε-DP matrix satisfies `max_y M[y][i] <= e^ε min_y M[y][i]`,
//! which is exactly the cone spanned by the two-level vectors
//! `v_S(y) = 1 if y ∈ S else e^{-ε}` over label subsets `S`. Writing every
//! column as such a conic combination turns the randomizer LP into a master
//! problem with only `2k` equality rows (normalization and unbiasedness) and
//! one variable per (output, subset) pair.
//!
//! Pricing a subset for a fixed output separates over labels: with row duals
//! `u` (normalization) and `w` (unbiasedness), label `y` contributes
//! `v_S(y)·r_y` with `r_y = cost_y − u_y − w_y·ŷ`, minimized by putting `y`
//! in `S` exactly when `r_y < 0`. On a grid this is `O(k)` per output. Over
//! an interval of outputs the reduced cost is piecewise quadratic in `ŷ` with
//! breakpoints at the roots of the `r_y`, so its minimum is found exactly by
//! checking breakpoints, interval ends and the vertex of each piece.

use std::collections::HashSet;

use log::{debug, warn};

use crate::error::{Error, Result};
use crate::labels::Prior;

use super::simplex::{self, SimplexStatus, StandardLp};

/// Relative reduced cost below which a column counts as improving.
const RC_TOL: f64 = 1e-9;
/// Largest accepted `|Ax − b|` of a master solution.
const RESIDUAL_TOL: f64 = 1e-9;

/// Where outputs may be placed.
#[derive(Debug, Clone, Copy)]
pub(crate) enum OutputSpace<'a> {
    Grid(&'a [f64]),
    Interval(f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StaircaseColumn {
    pub output: f64,
    /// Labels at the high level.
    pub members: Vec<bool>,
    /// Mass at the high level; low entries carry `weight·e^{-ε}`.
    pub weight: f64,
}

#[derive(Debug, Clone)]
pub struct ColumnGenerationResult {
    /// Columns with positive weight in the final master solution.
    pub columns: Vec<StaircaseColumn>,
    pub objective: f64,
    pub rounds: usize,
    pub pool_size: usize,
    pub pivots: usize,
    /// Most negative reduced cost left when the loop stopped.
    pub final_reduced_cost: f64,
}

#[derive(Debug, Clone)]
struct Column {
    output: f64,
    members: Vec<bool>,
}

struct Pricer<'a> {
    ys: &'a [f64],
    p: &'a [f64],
    low: f64,
    scale: f64,
}

impl Pricer<'_> {
    fn r(&self, y: usize, o: f64, u: &[f64], w: &[f64], phase_two: bool) -> f64 {
        let base = if phase_two { self.p[y] * 0.5 * (o - self.ys[y]) * (o - self.ys[y]) } else { 0.0 };
        base - u[y] - w[y] * o / self.scale
    }

    /// Best subset for output `o`, its reduced cost and a magnitude for the
    /// stopping tolerance.
    fn best_at(&self, o: f64, u: &[f64], w: &[f64], phase_two: bool) -> (f64, Vec<bool>, f64) {
        let k = self.ys.len();
        let mut rc = 0.0;
        let mut mag = 0.0;
        let mut members = vec![false; k];
        for y in 0..k {
            let r = self.r(y, o, u, w, phase_two);
            mag += r.abs() + u[y].abs();
            if r < 0.0 {
                members[y] = true;
                rc += r;
            } else {
                rc += self.low * r;
            }
        }
        (rc, members, mag)
    }

    /// Candidate outputs in `[lo, hi]` containing a global minimizer of the
    /// piecewise quadratic reduced cost.
    fn interval_candidates(&self, lo: f64, hi: f64, u: &[f64], w: &[f64], phase_two: bool) -> Vec<f64> {
        let k = self.ys.len();
        let mut pts = vec![lo, hi];
        for y in 0..k {
            // r_y(o) = a o² + b o + c
            let (a, b, c) = if phase_two {
                let py = self.p[y];
                let yy = self.ys[y];
                (0.5 * py, -py * yy - w[y] / self.scale, 0.5 * py * yy * yy - u[y])
            } else {
                (0.0, -w[y] / self.scale, -u[y])
            };
            if a > 0.0 {
                let disc = b * b - 4.0 * a * c;
                if disc >= 0.0 {
                    let s = disc.sqrt();
                    // Numerically stable pair of roots.
                    let q = -0.5 * (b + b.signum() * s);
                    if q != 0.0 {
                        pts.push(q / a);
                        pts.push(c / q);
                    } else {
                        pts.push(0.0);
                    }
                }
            } else if b != 0.0 {
                pts.push(-c / b);
            }
        }
        pts.retain(|x| x.is_finite() && *x >= lo && *x <= hi);
        pts.sort_by(f64::total_cmp);
        pts.dedup();
        let mut out = pts.clone();
        for win in pts.windows(2) {
            let mid = 0.5 * (win[0] + win[1]);
            let (_, members, _) = self.best_at(mid, u, w, phase_two);
            let (mut a, mut b) = (0.0, 0.0);
            for y in 0..k {
                let coef = if members[y] { 1.0 } else { self.low };
                if phase_two {
                    a += coef * 0.5 * self.p[y];
                    b += coef * -self.p[y] * self.ys[y];
                }
                b -= coef * w[y] / self.scale;
            }
            if a > 0.0 {
                let v = -b / (2.0 * a);
                if v > win[0] && v < win[1] {
                    out.push(v);
                }
            }
        }
        out
    }
}

pub(crate) fn solve(
    prior: &Prior,
    space: OutputSpace<'_>,
    epsilon: f64,
    max_iters: usize,
    max_rounds: usize,
) -> Result<ColumnGenerationResult> {
    let ys = prior.labels().values();
    let k = ys.len();
    let low = (-epsilon).exp();
    let (lo, hi) = match space {
        OutputSpace::Grid(g) => (g[0], g[g.len() - 1]),
        OutputSpace::Interval(lo, hi) => {
            if !(lo < hi) {
                return Err(Error::Parameter(format!("empty output interval [{lo}, {hi}]")));
            }
            (lo, hi)
        }
    };
    let scale = ys.iter().chain([&lo, &hi]).map(|v| v.abs()).fold(1.0, f64::max);
    let pricer = Pricer { ys, p: prior.probs(), low, scale };

    let entry = |c: &Column, y: usize| if c.members[y] { 1.0 } else { low };
    let start: Vec<f64> = match space {
        OutputSpace::Grid(g) => g.to_vec(),
        OutputSpace::Interval(lo, hi) => vec![lo, hi],
    };
    let mut pool: Vec<Column> = start.iter().map(|&o| Column { output: o, members: vec![true; k] }).collect();
    let mut seen: HashSet<(u64, Vec<bool>)> = pool.iter().map(|c| (c.output.to_bits(), c.members.clone())).collect();

    let mut b = vec![1.0; k];
    b.extend(ys.iter().map(|y| y / scale));

    let mut rounds = 0;
    let mut pivots = 0;
    let mut last_good: Option<ColumnGenerationResult> = None;
    loop {
        rounds += 1;
        let mut a = vec![Vec::with_capacity(pool.len()); 2 * k];
        let mut c = Vec::with_capacity(pool.len());
        for col in &pool {
            let o = col.output;
            let mut total = 0.0;
            for y in 0..k {
                let v = entry(col, y);
                a[y].push(v);
                a[k + y].push(v * o / scale);
                total += v * prior.probs()[y] * 0.5 * (o - ys[y]) * (o - ys[y]);
            }
            c.push(total);
        }
        let lp = StandardLp { a, b: b.clone(), c };
        let res = simplex::solve(&lp, max_iters);
        pivots += res.iterations;
        let phase_two = match res.status {
            SimplexStatus::Optimal => true,
            SimplexStatus::Infeasible => false,
            SimplexStatus::Unbounded => return Err(Error::Unbounded),
            SimplexStatus::IterationLimit => return Err(Error::IterationLimit(max_iters)),
        };
        let (u, w) = res.duals.split_at(k);

        let candidates: Vec<f64> = match space {
            OutputSpace::Grid(g) => g.to_vec(),
            OutputSpace::Interval(lo, hi) => pricer.interval_candidates(lo, hi, u, w, phase_two),
        };
        let priced: Vec<(f64, f64, Vec<bool>, f64)> = candidates
            .into_iter()
            .map(|o| {
                let (rc, members, mag) = pricer.best_at(o, u, w, phase_two);
                (o, rc, members, mag)
            })
            .collect();
        // On a grid, only local minima of the reduced cost along the grid
        // enter; this keeps the master small without slowing convergence.
        let keep: Vec<bool> = match space {
            OutputSpace::Grid(_) => (0..priced.len())
                .map(|i| {
                    let rc = priced[i].1;
                    (i == 0 || rc <= priced[i - 1].1) && (i + 1 == priced.len() || rc <= priced[i + 1].1)
                })
                .collect(),
            OutputSpace::Interval(..) => vec![true; priced.len()],
        };
        let mut added = 0;
        let mut best_rc: f64 = 0.0;
        for ((o, rc, members, mag), keep) in priced.into_iter().zip(keep) {
            if !keep || !members.iter().any(|m| *m) {
                continue;
            }
            if rc < -RC_TOL * (1.0 + mag) {
                best_rc = best_rc.min(rc);
                if seen.insert((o.to_bits(), members.clone())) {
                    pool.push(Column { output: o, members });
                    added += 1;
                }
            }
        }
        debug!(
            "column generation round {rounds}: phase {}, objective {:.12e}, {added} columns added (best rc {best_rc:.3e}), pool {}",
            if phase_two { 2 } else { 1 },
            res.objective,
            pool.len()
        );

        if phase_two && res.residual > RESIDUAL_TOL {
            // The master has become too ill-conditioned to trust; fall back
            // to the last accurate solution.
            warn!("column generation: master residual {:.3e} in round {rounds}, stopping", res.residual);
            return last_good.ok_or(Error::Infeasible { residual: res.residual });
        }
        if !phase_two && added == 0 {
            return Err(Error::Infeasible { residual: res.infeasibility });
        }
        if phase_two {
            let columns = pool
                .iter()
                .zip(&res.x)
                .filter(|(_, x)| **x > 0.0)
                .map(|(col, x)| StaircaseColumn { output: col.output, members: col.members.clone(), weight: *x })
                .collect();
            let current = ColumnGenerationResult {
                columns,
                objective: res.objective,
                rounds,
                pool_size: pool.len(),
                pivots,
                final_reduced_cost: best_rc,
            };
            if added == 0 {
                return Ok(current);
            }
            if rounds >= max_rounds {
                warn!("column generation stopped after {rounds} rounds with reduced cost {best_rc:.3e}");
                return Ok(current);
            }
            last_good = Some(current);
        } else if rounds >= max_rounds {
            return Err(Error::IterationLimit(rounds));
        }
    }
}

//! Optimal unbiased randomizers by linear programming.
//!
//! [`compute_opt_unbiased`] minimizes the expected squared error
//! `Σ_y p_y Σ_i M[y][i]·½(ŷ_i − y)²` over ε-DP matrices with
//! `E[M(y)] = y`. [`feasible_output_set`] builds an output grid on which that
//! problem is always feasible, and [`structure`] checks solver outputs against
//! the known shape of optimal solutions.

mod colgen;
pub mod problem;
pub mod simplex;
pub mod structure;

use log::debug;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{LabelSet, OutputGrid, Prior};
use crate::loss::LossKind;
use crate::randomizer::RandomizerMatrix;

use colgen::OutputSpace;

pub use colgen::{ColumnGenerationResult, StaircaseColumn};
pub use problem::{build_lp, solve_lp, LpProblem, LpSolution, LpStatus, VarRole};
pub use structure::{
    check_structure, prune_support, signature_of, PruneOutcome, Sig, SignatureMatrix, StaircaseForm, StructureReport,
};

pub const DEFAULT_GRID_SIZE: usize = 256;
pub const DEFAULT_PRUNE_THRESHOLD: f64 = 1e-7;
pub const MIN_EPSILON: f64 = 1e-3;
pub const DEFAULT_MAX_ITERS: usize = 200_000;
pub const DEFAULT_MAX_ROUNDS: usize = 2_000;

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon.is_finite() && epsilon >= MIN_EPSILON) {
        return Err(Error::Parameter(format!("epsilon must be finite and at least {MIN_EPSILON}, got {epsilon}")));
    }
    Ok(())
}

/// Smallest and largest outputs of debiased randomized response on `labels`.
pub fn grid_endpoints(labels: &LabelSet, epsilon: f64) -> (f64, f64) {
    let e = epsilon.exp();
    let k = labels.len() as f64;
    let sum = labels.sum();
    let lo = ((e + k - 1.0) * labels.min() - sum) / (e - 1.0);
    let hi = ((e + k - 1.0) * labels.max() - sum) / (e - 1.0);
    (lo, hi)
}

/// Evenly spaced grid of `n` points between the dbRR endpoints. A single
/// label yields the one-point grid `{y}`.
pub fn feasible_output_set(labels: &LabelSet, epsilon: f64, n: usize) -> Result<OutputGrid> {
    check_epsilon(epsilon)?;
    if labels.len() == 1 {
        return OutputGrid::new(vec![labels.min()]);
    }
    if n < 2 {
        return Err(Error::Parameter(format!("grid needs at least 2 points, got {n}")));
    }
    let (lo, hi) = grid_endpoints(labels, epsilon);
    OutputGrid::linspace(lo, hi, n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LpBackend {
    /// Master problem over two-level columns; exact and much smaller.
    #[default]
    ColumnGeneration,
    /// The explicit LP from [`build_lp`], solved directly.
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub backend: LpBackend,
    /// Simplex pivot limit per solve.
    pub max_iters: usize,
    /// Column generation round limit.
    pub max_rounds: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            backend: LpBackend::ColumnGeneration,
            max_iters: DEFAULT_MAX_ITERS,
            max_rounds: DEFAULT_MAX_ROUNDS,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptUnbiased {
    pub matrix: RandomizerMatrix,
    /// LP objective: the noisy label loss under the prior.
    pub objective: f64,
    pub iterations: usize,
}

/// Optimal unbiased ε-DP randomizer from `prior.labels()` onto `grid`.
pub fn compute_opt_unbiased(prior: &Prior, grid: &OutputGrid, epsilon: f64) -> Result<RandomizerMatrix> {
    Ok(compute_opt_unbiased_with(prior, grid, epsilon, &SolverOptions::default())?.matrix)
}

pub fn compute_opt_unbiased_with(
    prior: &Prior,
    grid: &OutputGrid,
    epsilon: f64,
    options: &SolverOptions,
) -> Result<OptUnbiased> {
    check_epsilon(epsilon)?;
    let labels = prior.labels();
    if labels.len() == 1 {
        let y = labels.min();
        let idx = grid
            .values()
            .iter()
            .position(|v| *v == y)
            .ok_or_else(|| Error::Infeasible { residual: (grid.min() - y).abs().min((grid.max() - y).abs()) })?;
        let mut row = vec![0.0; grid.len()];
        row[idx] = 1.0;
        let matrix = RandomizerMatrix::new(labels.clone(), grid.clone(), vec![row], epsilon)?;
        return Ok(OptUnbiased { matrix, objective: 0.0, iterations: 0 });
    }

    let (probs, objective, iterations) = match options.backend {
        LpBackend::ColumnGeneration => {
            let r =
                colgen::solve(prior, OutputSpace::Grid(grid.values()), epsilon, options.max_iters, options.max_rounds)?;
            debug!("column generation: {} rounds, pool {}, {} pivots", r.rounds, r.pool_size, r.pivots);
            let low = (-epsilon).exp();
            let mut probs = vec![vec![0.0; grid.len()]; labels.len()];
            for c in &r.columns {
                let i = grid.values().binary_search_by(|v| v.total_cmp(&c.output)).expect("grid output");
                for (y, row) in probs.iter_mut().enumerate() {
                    row[i] += if c.members[y] { c.weight } else { c.weight * low };
                }
            }
            (probs, r.objective, r.pivots)
        }
        LpBackend::Dense => {
            let lp = build_lp(prior, grid, epsilon, LossKind::Squared)?;
            let sol = solve_lp(&lp, options.max_iters);
            match sol.status {
                LpStatus::Optimal => {}
                LpStatus::Infeasible => return Err(Error::Infeasible { residual: sol.max_violation }),
                LpStatus::Unbounded => return Err(Error::Unbounded),
                LpStatus::IterationLimit => return Err(Error::IterationLimit(options.max_iters)),
            }
            let e = epsilon.exp();
            let probs = (0..lp.labels)
                .map(|y| {
                    (0..lp.outputs)
                        .map(|i| {
                            let m = sol.values[lp.column_min_index(i)].max(0.0);
                            sol.values[lp.entry_index(y, i)].clamp(m, e * m)
                        })
                        .collect()
                })
                .collect();
            (probs, sol.objective_value, sol.iterations)
        }
    };
    let probs: Vec<Vec<f64>> =
        probs.into_iter().map(|r: Vec<f64>| r.into_iter().map(|v| v.max(0.0)).collect()).collect();
    let matrix = RandomizerMatrix::new(labels.clone(), grid.clone(), probs, epsilon)?.renormalized()?;
    Ok(OptUnbiased { matrix, objective, iterations })
}

#[derive(Debug, Clone)]
pub struct ContinuousOptimum {
    /// One column per label subset, outputs anywhere in the dbRR hull.
    pub form: StaircaseForm,
    pub matrix: RandomizerMatrix,
    pub objective: f64,
    pub rounds: usize,
    pub final_reduced_cost: f64,
}

/// Optimal unbiased randomizer with outputs free to take any value between
/// the dbRR endpoints. Column generation prices every real output exactly;
/// columns that share a label subset are then pooled at their mean output.
/// The objective is a lower bound on [`compute_opt_unbiased`] over any grid
/// inside the same interval.
pub fn compute_opt_unbiased_continuous(
    prior: &Prior,
    epsilon: f64,
    options: &SolverOptions,
) -> Result<ContinuousOptimum> {
    check_epsilon(epsilon)?;
    let labels = prior.labels();
    if labels.len() == 1 {
        let y = labels.min();
        let form = StaircaseForm::new(
            labels.clone(),
            epsilon,
            vec![StaircaseColumn { output: y, members: vec![true], weight: 1.0 }],
        );
        let matrix = form.to_matrix()?;
        return Ok(ContinuousOptimum { form, matrix, objective: 0.0, rounds: 0, final_reduced_cost: 0.0 });
    }
    let (lo, hi) = grid_endpoints(labels, epsilon);
    let r = colgen::solve(prior, OutputSpace::Interval(lo, hi), epsilon, options.max_iters, options.max_rounds)?;
    debug!(
        "continuous column generation: {} rounds, pool {}, final rc {:.3e}",
        r.rounds, r.pool_size, r.final_reduced_cost
    );
    let form = StaircaseForm::new(labels.clone(), epsilon, r.columns).pooled();
    let matrix = form.to_matrix()?;
    Ok(ContinuousOptimum {
        form,
        matrix,
        objective: r.objective,
        rounds: r.rounds,
        final_reduced_cost: r.final_reduced_cost,
    })
}

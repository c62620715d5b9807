//! Exact loss and bias diagnostics over finite randomizers and joint
//! distributions. Nothing here samples; these routines are the oracles the
//! rest of the crate is checked against.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{LabelSet, OutputGrid, Prior};
use crate::loss::LossKind;
use crate::mechanisms;
use crate::optlp::{self, SolverOptions, StructureReport};
use crate::randomizer::RandomizerMatrix;

/// Finite joint distribution over (feature symbol, label).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointDistribution {
    features: Vec<String>,
    labels: LabelSet,
    /// `mass[x][y]`
    mass: Vec<Vec<f64>>,
}

impl JointDistribution {
    pub const SUM_TOL: f64 = 1e-12;

    pub fn new(features: Vec<String>, labels: LabelSet, mass: Vec<Vec<f64>>) -> Result<Self> {
        Self::with_tolerance(features, labels, mass, Self::SUM_TOL)
    }

    fn with_tolerance(features: Vec<String>, labels: LabelSet, mass: Vec<Vec<f64>>, tol: f64) -> Result<Self> {
        if mass.len() != features.len() {
            return Err(Error::Structure(format!("{} mass rows for {} features", mass.len(), features.len())));
        }
        for (i, f) in features.iter().enumerate() {
            if features[..i].contains(f) {
                return Err(Error::Structure(format!("duplicate feature '{f}'")));
            }
        }
        let mut total = 0.0;
        for row in &mass {
            if row.len() != labels.len() {
                return Err(Error::Structure(format!("mass row of length {} for {} labels", row.len(), labels.len())));
            }
            if let Some(m) = row.iter().find(|m| !(m.is_finite() && **m >= 0.0)) {
                return Err(Error::Structure(format!("invalid mass {m}")));
            }
            total += row.iter().sum::<f64>();
        }
        if (total - 1.0).abs() > tol {
            return Err(Error::Structure(format!("joint mass sums to {total}, not 1")));
        }
        Ok(Self { features, labels, mass })
    }

    /// The two-feature example over labels {0, 1, 2} whose Bayes predictor is
    /// (0.4, 0.7).
    pub fn table1() -> Self {
        Self::new(vec!["a".into(), "b".into()], LabelSet::range(3), vec![vec![0.35, 0.1, 0.05], vec![0.25, 0.15, 0.1]])
            .expect("valid example")
    }

    /// Each feature `x` carries weight `weights[x]` and label `labels[label_of[x]]`
    /// with probability one.
    pub fn deterministic(features: Vec<String>, labels: LabelSet, label_of: &[usize], weights: &[f64]) -> Result<Self> {
        if label_of.len() != features.len() || weights.len() != features.len() {
            return Err(Error::Structure("one label index and weight per feature required".into()));
        }
        let s: f64 = weights.iter().sum();
        if !(s > 0.0) {
            return Err(Error::Parameter("feature weights must have positive sum".into()));
        }
        let mut mass = vec![vec![0.0; labels.len()]; features.len()];
        for (x, (&j, w)) in label_of.iter().zip(weights).enumerate() {
            if j >= labels.len() {
                return Err(Error::Parameter(format!("label index {j} out of range")));
            }
            mass[x][j] = w / s;
        }
        Self::with_tolerance(features, labels, mass, 1e-9)
    }

    pub fn features(&self) -> &[String] {
        &self.features
    }

    pub fn labels(&self) -> &LabelSet {
        &self.labels
    }

    pub fn mass(&self) -> &[Vec<f64>] {
        &self.mass
    }

    pub fn feature_marginal(&self) -> Vec<f64> {
        self.mass.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn label_marginal(&self) -> Result<Prior> {
        let w: Vec<f64> = (0..self.labels.len()).map(|j| self.mass.iter().map(|r| r[j]).sum()).collect();
        Prior::from_weights(self.labels.clone(), &w)
    }

    fn conditional_mean(&self, x: usize) -> Option<f64> {
        let row = &self.mass[x];
        let px: f64 = row.iter().sum();
        (px > 0.0).then(|| row.iter().zip(self.labels.values()).map(|(m, y)| m * y).sum::<f64>() / px)
    }
}

/// Prediction per feature symbol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorTable(Vec<(String, f64)>);

impl PredictorTable {
    pub fn new(entries: Vec<(String, f64)>) -> Self {
        Self(entries)
    }

    pub fn get(&self, feature: &str) -> Option<f64> {
        self.0.iter().find(|(f, _)| f == feature).map(|(_, v)| *v)
    }

    pub fn entries(&self) -> &[(String, f64)] {
        &self.0
    }

    /// Largest absolute difference over features present in both tables.
    pub fn max_gap(&self, other: &PredictorTable) -> f64 {
        self.0.iter().filter_map(|(f, v)| other.get(f).map(|w| (v - w).abs())).fold(0.0, f64::max)
    }
}

fn check_inputs(matrix: &RandomizerMatrix, labels: &LabelSet) -> Result<()> {
    if matrix.inputs() != labels {
        return Err(Error::Structure("randomizer inputs differ from the label set".into()));
    }
    Ok(())
}

fn check_poisson_outputs(outputs: &OutputGrid, loss: LossKind) -> Result<()> {
    if loss == LossKind::Poisson && outputs.min() <= 0.0 {
        return Err(Error::Domain(format!("poisson loss needs positive outputs, smallest is {}", outputs.min())));
    }
    Ok(())
}

/// `G(M; P) = Σ_y p_y Σ_i M[y][i]·ℓ(ŷ_i, y)`.
pub fn noisy_label_loss(matrix: &RandomizerMatrix, prior: &Prior, loss: LossKind) -> Result<f64> {
    check_inputs(matrix, prior.labels())?;
    check_poisson_outputs(matrix.outputs(), loss)?;
    let outs = matrix.outputs().values();
    let mut total = 0.0;
    for ((row, p), y) in matrix.probs().iter().zip(prior.probs()).zip(prior.labels().values()) {
        for (q, o) in row.iter().zip(outs) {
            total += p * q * loss.value(*o, *y)?;
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelMoments {
    pub bias: f64,
    pub variance: f64,
}

/// Bias and variance of the randomized label, per input label.
pub fn label_moments(matrix: &RandomizerMatrix) -> Vec<LabelMoments> {
    let outs = matrix.outputs().values();
    matrix
        .probs()
        .iter()
        .zip(matrix.inputs().values())
        .map(|(row, y)| {
            let mean: f64 = row.iter().zip(outs).map(|(q, o)| q * o).sum();
            let variance = row.iter().zip(outs).map(|(q, o)| q * (o - mean) * (o - mean)).sum();
            LabelMoments { bias: mean - y, variance }
        })
        .collect()
}

/// Conditional mean of the label given each feature.
pub fn bayes_predictor(joint: &JointDistribution) -> Result<PredictorTable> {
    let mut out = Vec::with_capacity(joint.features.len());
    for (x, f) in joint.features.iter().enumerate() {
        let v =
            joint.conditional_mean(x).ok_or_else(|| Error::Domain(format!("feature '{f}' has zero marginal mass")))?;
        out.push((f.clone(), v));
    }
    Ok(PredictorTable(out))
}

/// Joint of `(x, M(y))`, over the randomizer's outputs.
pub fn pushforward(joint: &JointDistribution, matrix: &RandomizerMatrix) -> Result<JointDistribution> {
    check_inputs(matrix, &joint.labels)?;
    let n_out = matrix.outputs().len();
    let mass = joint
        .mass
        .iter()
        .map(|row| {
            let mut out = vec![0.0; n_out];
            for (m, mrow) in row.iter().zip(matrix.probs()) {
                for (o, q) in out.iter_mut().zip(mrow) {
                    *o += m * q;
                }
            }
            out
        })
        .collect();
    let labels = LabelSet::new(matrix.outputs().values().to_vec())?;
    JointDistribution::with_tolerance(joint.features.clone(), labels, mass, 1e-9)
}

/// `E_{(x,y)∼D} ℓ(f(x), y)`.
pub fn population_loss(predictor: &PredictorTable, joint: &JointDistribution, loss: LossKind) -> Result<f64> {
    let mut total = 0.0;
    for (f, row) in joint.features.iter().zip(&joint.mass) {
        let pred =
            predictor.get(f).ok_or_else(|| Error::Parameter(format!("predictor has no value for feature '{f}'")))?;
        for (m, y) in row.iter().zip(joint.labels.values()) {
            if *m > 0.0 {
                total += m * loss.value(pred, *y)?;
            }
        }
    }
    Ok(total)
}

/// Terms of `L_D(f) ≤ G(M; P) + E_{(x,y)∼D, ŷ∼M(y)} ℓ(f(x), ŷ)`, returned as
/// `(left side, noisy label loss, noisy population loss)`.
pub fn triangle_terms(
    predictor: &PredictorTable,
    joint: &JointDistribution,
    matrix: &RandomizerMatrix,
    loss: LossKind,
) -> Result<(f64, f64, f64)> {
    let lhs = population_loss(predictor, joint, loss)?;
    let g = noisy_label_loss(matrix, &joint.label_marginal()?, loss)?;
    let noisy = population_loss(predictor, &pushforward(joint, matrix)?, loss)?;
    Ok((lhs, g, noisy))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    /// Number of grid intervals; the grid has `mesh + 1` points.
    pub mesh: usize,
    /// Grid spacing.
    pub delta: f64,
    pub loss: f64,
    /// `loss ≤ loss(finest) + (U − L)·delta`.
    pub bound_ok: bool,
}

/// Optimal unbiased loss on successively finer grids over the same range.
/// With mesh sizes dividing each other the grids are nested, so the losses
/// can only go down.
pub fn discretization_sweep(
    prior: &Prior,
    epsilon: f64,
    mesh_sizes: &[usize],
    options: &SolverOptions,
) -> Result<Vec<SweepPoint>> {
    if mesh_sizes.is_empty() {
        return Err(Error::Parameter("no mesh sizes given".into()));
    }
    if mesh_sizes.iter().any(|m| *m < 2) || mesh_sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Parameter(format!("mesh sizes must be >= 2 and increasing, got {mesh_sizes:?}")));
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::Parameter(format!("epsilon must be positive, got {epsilon}")));
    }
    let (lo, hi) = optlp::grid_endpoints(prior.labels(), epsilon);
    let width = hi - lo;
    let losses: Vec<f64> = mesh_sizes
        .par_iter()
        .map(|&m| {
            let grid = OutputGrid::linspace(lo, hi, m + 1)?;
            let opt = optlp::compute_opt_unbiased_with(prior, &grid, epsilon, options)?;
            Ok(opt.objective)
        })
        .collect::<Result<_>>()?;
    let finest = *losses.last().expect("nonempty");
    Ok(mesh_sizes
        .iter()
        .zip(losses)
        .map(|(&mesh, loss)| {
            let delta = width / mesh as f64;
            SweepPoint { mesh, delta, loss, bound_ok: loss <= finest + width * delta + 1e-9 }
        })
        .collect())
}

/// Squared noisy label loss of the main mechanisms at one privacy level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonPoint {
    pub epsilon: f64,
    pub opt_unbiased: f64,
    pub dbrr: f64,
    pub rr_on_bins: f64,
    pub rr: f64,
}

/// Noisy label losses under `prior` for each `epsilon`, with the optimal
/// unbiased randomizer solved on a `grid_size`-point grid.
pub fn epsilon_sweep(
    prior: &Prior,
    epsilons: &[f64],
    grid_size: usize,
    options: &SolverOptions,
) -> Result<Vec<EpsilonPoint>> {
    if epsilons.is_empty() {
        return Err(Error::Parameter("no epsilons given".into()));
    }
    if prior.labels().len() < 2 {
        return Err(Error::Parameter("an epsilon sweep needs at least two labels".into()));
    }
    epsilons
        .par_iter()
        .map(|&epsilon| {
            let grid = optlp::feasible_output_set(prior.labels(), epsilon, grid_size)?;
            let opt = optlp::compute_opt_unbiased_with(prior, &grid, epsilon, options)?;
            let sq = |m: &RandomizerMatrix| noisy_label_loss(m, prior, LossKind::Squared);
            Ok(EpsilonPoint {
                epsilon,
                opt_unbiased: opt.objective,
                dbrr: sq(&mechanisms::dbrr_matrix(prior.labels(), epsilon)?)?,
                rr_on_bins: sq(&mechanisms::optimal_rr_on_bins(prior, epsilon)?.1)?,
                rr: sq(&mechanisms::rr_matrix(prior.labels(), epsilon)?)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StructureFlags {
    pub unbiased: bool,
    pub dp_satisfied: bool,
    pub support_bound_ok: bool,
    pub columns_two_level_ok: bool,
    pub column_pattern_ok: bool,
    pub phi_monotone_ok: bool,
}

/// Summary emitted by the `evaluate` and `verify` commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    /// Squared noisy label loss; absent when no prior was supplied.
    pub noisy_label_loss: Option<f64>,
    pub per_label_bias: Vec<f64>,
    pub per_label_variance: Vec<f64>,
    pub support_size: usize,
    pub structure_flags: StructureFlags,
    pub max_bias: f64,
    pub worst_dp_ratio: f64,
}

/// Tolerance used for the structure checks in [`report`].
pub const STRUCTURE_TOL: f64 = 1e-6;
/// Tolerance used for the unbiasedness check in [`report`].
pub const BIAS_TOL: f64 = 1e-7;

pub fn report(matrix: &RandomizerMatrix, prior: Option<&Prior>) -> Result<Report> {
    let noisy_label_loss = prior.map(|p| noisy_label_loss(matrix, p, LossKind::Squared)).transpose()?;
    let moments = label_moments(matrix);
    let validation = matrix.validate(BIAS_TOL);
    let pruned = optlp::prune_support(matrix, prior, optlp::DEFAULT_PRUNE_THRESHOLD)?;
    let s: StructureReport = optlp::check_structure(&pruned.matrix, STRUCTURE_TOL);
    Ok(Report {
        noisy_label_loss,
        per_label_bias: moments.iter().map(|m| m.bias).collect(),
        per_label_variance: moments.iter().map(|m| m.variance).collect(),
        support_size: s.support_size,
        structure_flags: StructureFlags {
            unbiased: validation.unbiased,
            dp_satisfied: validation.dp_satisfied,
            support_bound_ok: s.support_bound_ok,
            columns_two_level_ok: s.columns_two_level_ok,
            column_pattern_ok: s.column_pattern_ok,
            phi_monotone_ok: s.phi_monotone_ok,
        },
        max_bias: validation.max_bias,
        worst_dp_ratio: validation.worst_dp_ratio,
    })
}

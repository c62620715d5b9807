//! End-to-end label privatization.
//!
//! A run spends `ε₁` on a Laplace histogram of the labels, builds the output
//! grid from the label range, solves for the optimal unbiased randomizer at
//! `ε₂` against the noisy prior and then privatizes every label with it. The
//! whole run is `(ε₁ + ε₂)`-DP with respect to any single label.

use std::io::{Read, Write};
use std::path::Path;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{LabelSet, OutputGrid, Prior};
use crate::mechanisms::{clip, urr, ClipRange};
use crate::optlp::{self, SolverOptions};
use crate::randomizer::RandomizerMatrix;
use crate::rng::RandomSource;

/// Labels per independently seeded sampling chunk.
const CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetSplit {
    pub epsilon1: f64,
    pub epsilon2: f64,
}

impl BudgetSplit {
    pub fn new(epsilon1: f64, epsilon2: f64) -> Result<Self> {
        for (name, e) in [("epsilon1", epsilon1), ("epsilon2", epsilon2)] {
            if !(e > 0.0 && e.is_finite()) {
                return Err(Error::Parameter(format!("{name} must be positive, got {e}")));
            }
        }
        Ok(Self { epsilon1, epsilon2 })
    }

    /// Splits `total` with an explicit prior-estimation share.
    pub fn with_prior_epsilon(total: f64, epsilon1: f64) -> Result<Self> {
        if !(epsilon1 < total) {
            return Err(Error::Parameter(format!(
                "prior epsilon {epsilon1} leaves nothing of the total budget {total}"
            )));
        }
        Self::new(epsilon1, total - epsilon1)
    }

    /// Privacy cost of a run using this split.
    pub fn total(&self) -> f64 {
        self.epsilon1 + self.epsilon2
    }
}

/// `ε₁ = min(√(k/n), ε/2)`, `ε₂ = ε − ε₁`.
pub fn split_budget(epsilon: f64, k: usize, n: usize) -> Result<BudgetSplit> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::Parameter(format!("epsilon must be positive, got {epsilon}")));
    }
    if k == 0 || n == 0 {
        return Err(Error::Parameter(format!("need k >= 1 and n >= 1, got k={k}, n={n}")));
    }
    let e1 = (k as f64 / n as f64).sqrt().min(epsilon / 2.0);
    Ok(BudgetSplit { epsilon1: e1, epsilon2: epsilon - e1 })
}

/// Noise added to the label histogram.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HistogramNoise {
    #[default]
    Laplace,
    /// Exact counts. Not private; for tests and diagnostics only.
    Disabled,
}

pub fn label_counts(labels: &[f64], label_set: &LabelSet) -> Result<Vec<f64>> {
    if labels.is_empty() {
        return Err(Error::Empty("no labels to estimate a prior from".into()));
    }
    let mut counts = vec![0.0; label_set.len()];
    for &y in labels {
        counts[label_set.require_index(y)?] += 1.0;
    }
    Ok(counts)
}

/// Clips noisy counts at zero and normalizes. An all-zero histogram falls
/// back to the uniform prior.
pub fn prior_from_noisy_counts(label_set: &LabelSet, counts: &[f64]) -> Result<Prior> {
    if counts.len() != label_set.len() {
        return Err(Error::Structure(format!("{} counts for {} labels", counts.len(), label_set.len())));
    }
    let clipped: Vec<f64> = counts.iter().map(|c| c.max(0.0)).collect();
    if clipped.iter().sum::<f64>() <= 0.0 {
        warn!("every noisy count clipped to zero; using the uniform prior");
        return Ok(Prior::uniform(label_set.clone()));
    }
    Prior::from_weights(label_set.clone(), &clipped)
}

/// ε-DP estimate of the label distribution: histogram plus `Lap(2/ε)` per
/// bucket, clipped at zero and normalized.
pub fn estimate_prior_laplace(
    labels: &[f64],
    label_set: &LabelSet,
    epsilon: f64,
    rng: &mut RandomSource,
) -> Result<Prior> {
    estimate_prior_with(labels, label_set, epsilon, HistogramNoise::Laplace, rng)
}

pub fn estimate_prior_with(
    labels: &[f64],
    label_set: &LabelSet,
    epsilon: f64,
    noise: HistogramNoise,
    rng: &mut RandomSource,
) -> Result<Prior> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::Parameter(format!("epsilon must be positive, got {epsilon}")));
    }
    let mut counts = label_counts(labels, label_set)?;
    if noise == HistogramNoise::Laplace {
        // Replacing one label moves two buckets by one each.
        let b = 2.0 / epsilon;
        for c in &mut counts {
            *c += laplace(b, rng);
        }
    }
    prior_from_noisy_counts(label_set, &counts)
}

fn laplace(b: f64, rng: &mut RandomSource) -> f64 {
    let u = rng.uniform_open();
    -b * rng.sign() * u.ln()
}

/// Which budget share sets the output grid endpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GridEpsilon {
    /// The randomization budget `ε₂`, which makes the grid feasible for
    /// the LP solved at `ε₂`.
    #[default]
    Randomization,
    /// The prior-estimation budget `ε₁`.
    PriorEstimation,
}

#[derive(Debug, Clone)]
pub struct RandomizerConfig {
    pub grid_size: usize,
    pub grid_epsilon: GridEpsilon,
    /// Solve with outputs free in the grid's range instead of on the grid.
    pub continuous: bool,
    pub solver: SolverOptions,
}

impl Default for RandomizerConfig {
    fn default() -> Self {
        Self {
            grid_size: optlp::DEFAULT_GRID_SIZE,
            grid_epsilon: GridEpsilon::default(),
            continuous: false,
            solver: SolverOptions::default(),
        }
    }
}

/// Optimal unbiased randomizer at `ε₂` for an already estimated prior.
pub fn build_randomizer(prior: &Prior, split: BudgetSplit, config: &RandomizerConfig) -> Result<RandomizerMatrix> {
    let labels = prior.labels();
    if config.continuous && labels.len() > 1 {
        let opt = optlp::compute_opt_unbiased_continuous(prior, split.epsilon2, &config.solver)?;
        return Ok(opt.matrix);
    }
    let grid_eps = match config.grid_epsilon {
        GridEpsilon::Randomization => split.epsilon2,
        GridEpsilon::PriorEstimation => split.epsilon1,
    };
    let grid = optlp::feasible_output_set(labels, grid_eps, config.grid_size)?;
    let opt = optlp::compute_opt_unbiased_with(prior, &grid, split.epsilon2, &config.solver).map_err(|e| {
        if matches!(e, Error::Infeasible { .. }) && config.grid_epsilon == GridEpsilon::PriorEstimation {
            warn!("grid built at epsilon1 = {grid_eps} does not support an unbiased randomizer at epsilon2");
        }
        e
    })?;
    Ok(opt.matrix)
}

#[derive(Debug, Clone)]
pub struct PrivatizationRun {
    pub split: BudgetSplit,
    pub estimated_prior: Prior,
    pub randomizer: RandomizerMatrix,
    pub noisy_labels: Vec<f64>,
    pub seed: u64,
}

impl PrivatizationRun {
    pub fn privacy_cost(&self) -> f64 {
        self.split.total()
    }
}

/// Privatizes each label independently. Chunks of labels draw from disjoint
/// streams of `rng`'s seed, so the output does not depend on thread count.
pub fn randomize_labels(matrix: &RandomizerMatrix, labels: &[f64], rng: &RandomSource) -> Result<Vec<f64>> {
    let rows: Vec<usize> = labels.iter().map(|&y| matrix.inputs().require_index(y)).collect::<Result<_>>()?;
    let out = rows
        .par_chunks(CHUNK)
        .enumerate()
        .flat_map_iter(|(c, chunk)| {
            let mut r = rng.fork(c as u64);
            chunk
                .iter()
                .map(move |&row| matrix.outputs().values()[matrix.sample_index(row, &mut r)])
                .collect::<Vec<_>>()
        })
        .collect();
    Ok(out)
}

/// Runs the full private workflow with default solver settings.
pub fn label_randomizer(
    labels: &[f64],
    label_set: &LabelSet,
    epsilon1: f64,
    epsilon2: f64,
    grid_size: usize,
    rng: &mut RandomSource,
) -> Result<PrivatizationRun> {
    let config = RandomizerConfig { grid_size, ..Default::default() };
    label_randomizer_with(labels, label_set, BudgetSplit::new(epsilon1, epsilon2)?, &config, rng)
}

pub fn label_randomizer_with(
    labels: &[f64],
    label_set: &LabelSet,
    split: BudgetSplit,
    config: &RandomizerConfig,
    rng: &mut RandomSource,
) -> Result<PrivatizationRun> {
    let estimated_prior = estimate_prior_laplace(labels, label_set, split.epsilon1, rng)?;
    info!("budget split: epsilon1 = {}, epsilon2 = {}", split.epsilon1, split.epsilon2);
    let randomizer = build_randomizer(&estimated_prior, split, config)?;
    let noisy_labels = randomize_labels(&randomizer, labels, rng)?;
    Ok(PrivatizationRun { split, estimated_prior, randomizer, noisy_labels, seed: rng.seed() })
}

/// Grid `{lo, lo + step, …}` closed with `hi`, and each label rounded onto it
/// by unbiased randomized rounding.
pub fn discretize_continuous(
    labels: &[f64],
    lo: f64,
    hi: f64,
    step: f64,
    rng: &mut RandomSource,
) -> Result<(LabelSet, Vec<f64>)> {
    let grid = discretization_grid(lo, hi, step)?;
    let out = labels.iter().map(|&y| urr(snap(y, &grid, step), &grid, rng)).collect::<Result<Vec<_>>>()?;
    Ok((LabelSet::new(grid.values().to_vec())?, out))
}

pub fn discretization_grid(lo: f64, hi: f64, step: f64) -> Result<OutputGrid> {
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Parameter(format!("need finite lo < hi, got [{lo}, {hi}]")));
    }
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Parameter(format!("step must be positive, got {step}")));
    }
    let n = ((hi - lo) / step * (1.0 + 1e-12)).floor() as usize;
    let mut values: Vec<f64> = (0..=n).map(|i| lo + i as f64 * step).collect();
    let tiny = 1e-9 * step;
    if let Some(last) = values.last_mut() {
        if (*last - hi).abs() <= tiny {
            *last = hi;
        }
    }
    if values.last().is_some_and(|&v| v < hi) {
        values.push(hi);
    }
    OutputGrid::new(values)
}

/// Moves `y` onto a grid point lying within floating-point noise of it.
fn snap(y: f64, grid: &OutputGrid, step: f64) -> f64 {
    let tiny = 1e-9 * step;
    match grid.bracket(y) {
        Ok((a, b)) => {
            let (va, vb) = (grid.values()[a], grid.values()[b]);
            if (y - va).abs() <= tiny {
                va
            } else if (vb - y).abs() <= tiny {
                vb
            } else {
                y
            }
        }
        Err(_) => y,
    }
}

/// Clips labels into `range`. Clipping biases any label outside it, so the
/// number of changed labels is returned and logged.
pub fn clip_labels(labels: &[f64], range: ClipRange) -> (Vec<f64>, usize) {
    let out: Vec<f64> = labels.iter().map(|&y| clip(y, range)).collect();
    let changed = labels.iter().zip(&out).filter(|(a, b)| a != b).count();
    if changed > 0 {
        warn!("clipped {changed} labels into [{}, {}]; this biases them", range.lo, range.hi);
    }
    (out, changed)
}

/// Reads a single numeric column, with or without a `label` header.
pub fn read_labels<R: Read>(reader: R) -> Result<Vec<f64>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(reader);
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse(format!("line {}: {e}", line + 1)))?;
        let field = rec.get(0).unwrap_or("");
        if line == 0 && field.eq_ignore_ascii_case("label") {
            continue;
        }
        if rec.len() != 1 {
            return Err(Error::Parse(format!("line {}: expected one column, found {}", line + 1, rec.len())));
        }
        let v: f64 =
            field.parse().map_err(|_| Error::Parse(format!("line {}: '{field}' is not a number", line + 1)))?;
        if !v.is_finite() {
            return Err(Error::Parse(format!("line {}: label must be finite", line + 1)));
        }
        out.push(v);
    }
    if out.is_empty() {
        return Err(Error::Empty("label file has no rows".into()));
    }
    Ok(out)
}

pub fn read_labels_file(path: &Path) -> Result<Vec<f64>> {
    read_labels(std::fs::File::open(path)?)
}

/// Writes `noisy_label` rows, preceded by the original `label` column only
/// when `originals` is given.
pub fn write_noisy_labels<W: Write>(writer: W, originals: Option<&[f64]>, noisy: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    match originals {
        Some(orig) => {
            if orig.len() != noisy.len() {
                return Err(Error::Structure(format!("{} originals for {} noisy labels", orig.len(), noisy.len())));
            }
            w.write_record(["label", "noisy_label"])?;
            for (a, b) in orig.iter().zip(noisy) {
                w.write_record([fmt_num(*a), fmt_num(*b)])?;
            }
        }
        None => {
            w.write_record(["noisy_label"])?;
            for b in noisy {
                w.write_record([fmt_num(*b)])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_noisy_labels_file(path: &Path, originals: Option<&[f64]>, noisy: &[f64]) -> Result<()> {
    write_noisy_labels(std::fs::File::create(path)?, originals, noisy)
}

/// Shortest decimal that parses back to the same `f64`.
fn fmt_num(x: f64) -> String {
    format!("{x:?}")
}

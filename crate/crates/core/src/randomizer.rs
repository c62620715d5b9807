//! Finite label randomizers: a row-stochastic matrix from input labels to
//! output labels, plus checking, expectation, sampling and the JSON file
//! format.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{LabelSet, OutputGrid};
use crate::rng::RandomSource;

/// `probs[y][i]` is the probability that input label `inputs[y]` is released
/// as `outputs[i]`.
///
/// Construction checks shapes and finiteness only. Whether the matrix is a
/// valid, private and unbiased randomizer is answered by [`validate`].
///
/// [`validate`]: RandomizerMatrix::validate
#[derive(Debug, Clone, PartialEq)]
pub struct RandomizerMatrix {
    inputs: LabelSet,
    outputs: OutputGrid,
    probs: Vec<Vec<f64>>,
    epsilon: f64,
    cdf: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub row_stochastic: bool,
    pub dp_satisfied: bool,
    /// `max_y |Σ_i M[y][i]·ŷ_i − y|`
    pub max_bias: f64,
    pub unbiased: bool,
    /// Largest `max/min` ratio over nonzero columns; infinite when a column
    /// mixes zero and nonzero entries.
    pub worst_dp_ratio: f64,
    pub tolerance: f64,
}

impl ValidationReport {
    pub fn is_valid_unbiased(&self) -> bool {
        self.row_stochastic && self.dp_satisfied && self.unbiased
    }
}

impl RandomizerMatrix {
    pub fn new(inputs: LabelSet, outputs: OutputGrid, probs: Vec<Vec<f64>>, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::Parameter(format!("epsilon must be positive and finite, got {epsilon}")));
        }
        if probs.len() != inputs.len() {
            return Err(Error::Structure(format!("matrix has {} rows for {} input labels", probs.len(), inputs.len())));
        }
        for (r, row) in probs.iter().enumerate() {
            if row.len() != outputs.len() {
                return Err(Error::Structure(format!(
                    "row {r} has {} entries for {} output labels",
                    row.len(),
                    outputs.len()
                )));
            }
            if let Some(p) = row.iter().find(|p| !p.is_finite()) {
                return Err(Error::Structure(format!("row {r} contains non-finite entry {p}")));
            }
        }
        let cdf = probs
            .iter()
            .map(|row| {
                row.iter()
                    .scan(0.0, |acc, p| {
                        *acc += p.max(0.0);
                        Some(*acc)
                    })
                    .collect()
            })
            .collect();
        Ok(Self { inputs, outputs, probs, epsilon, cdf })
    }

    /// Builds a matrix from `(output value, column)` pairs in any order.
    /// Columns sharing an output value are summed into one.
    pub fn from_columns(inputs: LabelSet, mut columns: Vec<(f64, Vec<f64>)>, epsilon: f64) -> Result<Self> {
        if columns.is_empty() {
            return Err(Error::Structure("randomizer needs at least one output".into()));
        }
        columns.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut merged: Vec<(f64, Vec<f64>)> = Vec::with_capacity(columns.len());
        for (v, col) in columns {
            if col.len() != inputs.len() {
                return Err(Error::Structure(format!(
                    "column for output {v} has {} entries for {} inputs",
                    col.len(),
                    inputs.len()
                )));
            }
            match merged.last_mut() {
                Some((last, acc)) if *last == v => acc.iter_mut().zip(&col).for_each(|(a, c)| *a += c),
                _ => merged.push((v, col)),
            }
        }
        let outputs = OutputGrid::new(merged.iter().map(|(v, _)| *v).collect())?;
        let probs = (0..inputs.len()).map(|y| merged.iter().map(|(_, c)| c[y]).collect()).collect();
        Self::new(inputs, outputs, probs, epsilon)
    }

    /// Always returns the single label.
    pub fn pass_through(label: f64, epsilon: f64) -> Result<Self> {
        Self::new(LabelSet::new(vec![label])?, OutputGrid::new(vec![label])?, vec![vec![1.0]], epsilon)
    }

    pub fn inputs(&self) -> &LabelSet {
        &self.inputs
    }

    pub fn outputs(&self) -> &OutputGrid {
        &self.outputs
    }

    pub fn probs(&self) -> &[Vec<f64>] {
        &self.probs
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn row(&self, y_idx: usize) -> &[f64] {
        &self.probs[y_idx]
    }

    pub fn column(&self, i: usize) -> Vec<f64> {
        self.probs.iter().map(|r| r[i]).collect()
    }

    pub fn prob(&self, y: f64, out: f64) -> Result<f64> {
        let r = self.inputs.require_index(y)?;
        Ok(self.outputs.values().iter().position(|v| *v == out).map_or(0.0, |i| self.probs[r][i]))
    }

    fn row_mean(&self, r: usize) -> f64 {
        self.probs[r].iter().zip(self.outputs.values()).map(|(p, v)| p * v).sum()
    }

    /// `E[M(y)] = Σ_i M[y][i]·ŷ_i`.
    pub fn expected_output(&self, y: f64) -> Result<f64> {
        let r = self.inputs.require_index(y)?;
        Ok(self.row_mean(r))
    }

    /// Expected output for every input label, in input order.
    pub fn expected_outputs(&self) -> Vec<f64> {
        (0..self.inputs.len()).map(|r| self.row_mean(r)).collect()
    }

    /// Largest `max/min` ratio across nonzero columns.
    pub fn worst_dp_ratio(&self) -> f64 {
        let mut worst: f64 = 1.0;
        for i in 0..self.outputs.len() {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for row in &self.probs {
                lo = lo.min(row[i]);
                hi = hi.max(row[i]);
            }
            if hi <= 0.0 {
                continue;
            }
            let ratio = if lo <= 0.0 { f64::INFINITY } else { hi / lo };
            worst = worst.max(ratio);
        }
        worst
    }

    pub fn max_bias(&self) -> f64 {
        self.inputs.values().iter().enumerate().map(|(r, y)| (self.row_mean(r) - y).abs()).fold(0.0, f64::max)
    }

    /// Checks normalization, nonnegativity, ε-DP (at `self.epsilon`) and
    /// unbiasedness, each at tolerance `tol`.
    pub fn validate(&self, tol: f64) -> ValidationReport {
        assert!(tol > 0.0, "tolerance must be positive");
        let row_stochastic =
            self.probs.iter().all(|row| row.iter().all(|p| *p >= 0.0) && (row.iter().sum::<f64>() - 1.0).abs() <= tol);
        let worst_dp_ratio = self.worst_dp_ratio();
        let dp_satisfied = worst_dp_ratio <= self.epsilon.exp() * (1.0 + tol);
        let max_bias = self.max_bias();
        ValidationReport {
            row_stochastic,
            dp_satisfied,
            max_bias,
            unbiased: max_bias <= tol,
            worst_dp_ratio,
            tolerance: tol,
        }
    }

    /// Draws an output index for input row `r`.
    pub fn sample_index(&self, r: usize, rng: &mut RandomSource) -> usize {
        let cdf = &self.cdf[r];
        let total = cdf[cdf.len() - 1];
        let u = rng.uniform() * total;
        // First column whose cumulative mass exceeds u; zero-mass columns
        // never qualify. u < total keeps the index in range.
        cdf.partition_point(|c| *c <= u).min(cdf.len() - 1)
    }

    /// Draws `M(y)`.
    pub fn sample(&self, y: f64, rng: &mut RandomSource) -> Result<f64> {
        let r = self.inputs.require_index(y)?;
        Ok(self.outputs.values()[self.sample_index(r, rng)])
    }

    /// Drops output columns by index predicate, keeping row order.
    pub(crate) fn retain_columns(&self, keep: &[bool]) -> Result<Self> {
        let outputs: Vec<f64> = self.outputs.values().iter().zip(keep).filter(|(_, k)| **k).map(|(v, _)| *v).collect();
        let probs =
            self.probs.iter().map(|row| row.iter().zip(keep).filter(|(_, k)| **k).map(|(p, _)| *p).collect()).collect();
        Self::new(self.inputs.clone(), OutputGrid::new(outputs)?, probs, self.epsilon)
    }

    /// Rescales every row to sum to one.
    pub(crate) fn renormalized(mut self) -> Result<Self> {
        for row in &mut self.probs {
            let s: f64 = row.iter().sum();
            if !(s > 0.0) {
                return Err(Error::Structure("cannot renormalize an all-zero row".into()));
            }
            row.iter_mut().for_each(|p| *p /= s);
        }
        Self::new(self.inputs, self.outputs, self.probs, self.epsilon)
    }

    pub fn to_file(&self) -> RandomizerFile {
        RandomizerFile {
            epsilon: self.epsilon,
            input_labels: self.inputs.values().to_vec(),
            output_labels: self.outputs.values().to_vec(),
            probabilities: self.probs.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_file())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: RandomizerFile = serde_json::from_str(s)?;
        f.try_into()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// On-disk randomizer layout. Floats are written in shortest round-trip form,
/// so a save/load cycle is bit-exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomizerFile {
    pub epsilon: f64,
    pub input_labels: Vec<f64>,
    pub output_labels: Vec<f64>,
    pub probabilities: Vec<Vec<f64>>,
}

impl TryFrom<RandomizerFile> for RandomizerMatrix {
    type Error = Error;
    fn try_from(f: RandomizerFile) -> Result<Self> {
        RandomizerMatrix::new(
            LabelSet::new(f.input_labels)?,
            OutputGrid::new(f.output_labels)?,
            f.probabilities,
            f.epsilon,
        )
    }
}

/// Free-function form of [`RandomizerMatrix::validate`].
pub fn validate_randomizer(matrix: &RandomizerMatrix, tol: f64) -> Result<ValidationReport> {
    if !(tol > 0.0) {
        return Err(Error::Parameter(format!("tolerance must be positive, got {tol}")));
    }
    Ok(matrix.validate(tol))
}

pub fn expected_output(matrix: &RandomizerMatrix, y: f64) -> Result<f64> {
    matrix.expected_output(y)
}

pub fn sample(matrix: &RandomizerMatrix, y: f64, rng: &mut RandomSource) -> Result<f64> {
    matrix.sample(y, rng)
}

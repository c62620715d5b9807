//! Ordered label sequences and priors over them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RandomSource;

fn check_increasing(what: &str, values: &[f64]) -> Result<()> {
    if values.is_empty() {
        return Err(Error::Structure(format!("{what} must be non-empty")));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Structure(format!("{what} contains non-finite value {v}")));
    }
    if let Some(w) = values.windows(2).find(|w| w[0] >= w[1]) {
        return Err(Error::Structure(format!("{what} must be strictly increasing ({} followed by {})", w[0], w[1])));
    }
    Ok(())
}

/// The finite set of input labels, stored sorted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct LabelSet(Vec<f64>);

impl LabelSet {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        check_increasing("label set", &values)?;
        Ok(Self(values))
    }

    /// Sorts and deduplicates arbitrary observed labels.
    pub fn from_observed(values: &[f64]) -> Result<Self> {
        let mut v: Vec<f64> = values.to_vec();
        v.sort_by(f64::total_cmp);
        v.dedup();
        Self::new(v)
    }

    /// `{0, 1, ..., n-1}`
    pub fn range(n: usize) -> Self {
        assert!(n >= 1);
        Self((0..n).map(|i| i as f64).collect())
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.0[0]
    }

    pub fn max(&self) -> f64 {
        self.0[self.0.len() - 1]
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }

    /// Index of an exact member.
    pub fn index_of(&self, y: f64) -> Option<usize> {
        self.0.binary_search_by(|v| v.total_cmp(&y)).ok()
    }

    pub fn require_index(&self, y: f64) -> Result<usize> {
        self.index_of(y).ok_or(Error::UnknownLabel(y))
    }
}

impl TryFrom<Vec<f64>> for LabelSet {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<LabelSet> for Vec<f64> {
    fn from(l: LabelSet) -> Self {
        l.0
    }
}

/// Ordered, duplicate-free output labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct OutputGrid(Vec<f64>);

impl OutputGrid {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        check_increasing("output grid", &values)?;
        Ok(Self(values))
    }

    /// `n` evenly spaced points from `lo` to `hi` inclusive. The last point is
    /// pinned to `hi` exactly.
    pub fn linspace(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::Parameter(format!("grid size must be >= 2, got {n}")));
        }
        if !(lo < hi) {
            return Err(Error::Parameter(format!("grid needs lo < hi, got [{lo}, {hi}]")));
        }
        let step = (hi - lo) / (n - 1) as f64;
        let mut v: Vec<f64> = (0..n).map(|i| lo + step * i as f64).collect();
        v[n - 1] = hi;
        Self::new(v)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.0[0]
    }

    pub fn max(&self) -> f64 {
        self.0[self.0.len() - 1]
    }

    pub fn contains(&self, v: f64) -> bool {
        self.0.binary_search_by(|x| x.total_cmp(&v)).is_ok()
    }

    /// Indices `(lo, hi)` of the grid neighbours bracketing `y`; equal when
    /// `y` is a grid point.
    pub fn bracket(&self, y: f64) -> Result<(usize, usize)> {
        if !(self.min() <= y && y <= self.max()) {
            return Err(Error::Range { value: y, lo: self.min(), hi: self.max() });
        }
        match self.0.binary_search_by(|x| x.total_cmp(&y)) {
            Ok(i) => Ok((i, i)),
            Err(i) => Ok((i - 1, i)),
        }
    }
}

impl TryFrom<Vec<f64>> for OutputGrid {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<OutputGrid> for Vec<f64> {
    fn from(g: OutputGrid) -> Self {
        g.0
    }
}

/// Probability distribution over a [`LabelSet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prior {
    labels: LabelSet,
    probs: Vec<f64>,
}

impl Prior {
    pub const SUM_TOL: f64 = 1e-12;

    pub fn new(labels: LabelSet, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != labels.len() {
            return Err(Error::Structure(format!(
                "prior has {} probabilities for {} labels",
                probs.len(),
                labels.len()
            )));
        }
        if let Some(p) = probs.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
            return Err(Error::Structure(format!("invalid prior probability {p}")));
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > Self::SUM_TOL {
            return Err(Error::Structure(format!("prior sums to {s}, not 1")));
        }
        Ok(Self { labels, probs })
    }

    /// Normalizes nonnegative weights. Fails when they sum to zero.
    pub fn from_weights(labels: LabelSet, weights: &[f64]) -> Result<Self> {
        let s: f64 = weights.iter().sum();
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::Parameter(format!("weights must have positive finite sum, got {s}")));
        }
        Self::new(labels, weights.iter().map(|w| w / s).collect())
    }

    pub fn uniform(labels: LabelSet) -> Self {
        let k = labels.len();
        Self { labels, probs: vec![1.0 / k as f64; k] }
    }

    /// Draw from the flat Dirichlet distribution over `labels`.
    pub fn random_dirichlet(labels: LabelSet, rng: &mut RandomSource) -> Self {
        let w: Vec<f64> = (0..labels.len()).map(|_| -rng.uniform_open().ln()).collect();
        let s: f64 = w.iter().sum();
        Self { labels, probs: w.iter().map(|x| x / s).collect() }
    }

    pub fn labels(&self) -> &LabelSet {
        &self.labels
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn mean(&self) -> f64 {
        self.labels.values().iter().zip(&self.probs).map(|(y, p)| y * p).sum()
    }

    /// Total variation distance to another prior over the same labels.
    pub fn tv_distance(&self, other: &Prior) -> Result<f64> {
        if self.labels != other.labels {
            return Err(Error::Structure("priors over different label sets".into()));
        }
        Ok(0.5 * self.probs.iter().zip(&other.probs).map(|(a, b)| (a - b).abs()).sum::<f64>())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_set_rejects_unsorted_and_duplicates() {
        assert!(LabelSet::new(vec![1.0, 0.0]).is_err());
        assert!(LabelSet::new(vec![1.0, 1.0]).is_err());
        assert!(LabelSet::new(vec![]).is_err());
        assert!(LabelSet::new(vec![0.0, f64::NAN]).is_err());
        assert_eq!(LabelSet::from_observed(&[3.0, 1.0, 3.0]).unwrap().values(), &[1.0, 3.0]);
    }

    #[test]
    fn prior_sum_checked() {
        let y = LabelSet::range(2);
        assert!(Prior::new(y.clone(), vec![0.5, 0.5]).is_ok());
        assert!(Prior::new(y.clone(), vec![0.5, 0.6]).is_err());
        assert!(Prior::new(y, vec![1.0]).is_err());
    }

    #[test]
    fn bracket_and_linspace() {
        let g = OutputGrid::linspace(-3.0, 5.0, 3).unwrap();
        assert_eq!(g.values(), &[-3.0, 1.0, 5.0]);
        assert_eq!(g.bracket(1.0).unwrap(), (1, 1));
        assert_eq!(g.bracket(0.5).unwrap(), (0, 1));
        assert!(g.bracket(5.5).is_err());
    }
}

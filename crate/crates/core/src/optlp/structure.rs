//! Structural checks on solved randomizers: signature matrices, the
//! staircase column pattern and the support bound.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::labels::{LabelSet, Prior};
use crate::randomizer::RandomizerMatrix;

pub use super::colgen::StaircaseColumn;

/// Entries at or below this are treated as exact zeros.
pub const ZERO_ABS: f64 = 1e-14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sig {
    Zero,
    /// Column maximum, with the column's DP constraint tight.
    U,
    /// Column minimum, with the column's DP constraint tight.
    L,
    /// Strictly inside the DP band.
    S,
}

impl Sig {
    pub fn as_char(self) -> char {
        match self {
            Sig::Zero => '0',
            Sig::U => 'U',
            Sig::L => 'L',
            Sig::S => 'S',
        }
    }
}

/// One row per input label (ascending), one column per output.
#[derive(Debug, Clone, PartialEq)]
pub struct SignatureMatrix {
    pub entries: Vec<Vec<Sig>>,
    pub tol: f64,
}

impl SignatureMatrix {
    pub fn column(&self, i: usize) -> Vec<Sig> {
        self.entries.iter().map(|r| r[i]).collect()
    }

    pub fn columns(&self) -> usize {
        self.entries.first().map_or(0, |r| r.len())
    }

    pub fn column_string(&self, i: usize) -> String {
        self.column(i).into_iter().map(Sig::as_char).collect()
    }
}

fn close(a: f64, b: f64, tol: f64, scale: f64) -> bool {
    (a - b).abs() <= tol * scale
}

/// Classifies every entry with relative tolerance `tol` (relative to the
/// column maximum). A column whose max equals its min is classified all `U`.
pub fn signature_of(matrix: &RandomizerMatrix, tol: f64) -> SignatureMatrix {
    let k = matrix.inputs().len();
    let n = matrix.outputs().len();
    let e = matrix.epsilon().exp();
    let mut entries = vec![vec![Sig::S; n]; k];
    for i in 0..n {
        let col = matrix.column(i);
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let flat = close(hi, lo, tol, hi.abs());
        let tight = close(hi, e * lo, tol, hi.abs());
        for (y, v) in col.iter().enumerate() {
            entries[y][i] = if v.abs() <= ZERO_ABS {
                Sig::Zero
            } else if flat {
                Sig::U
            } else if tight && close(*v, hi, tol, hi) {
                Sig::U
            } else if tight && close(*v, lo, tol, hi) {
                Sig::L
            } else {
                Sig::S
            };
        }
    }
    SignatureMatrix { entries, tol }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructureReport {
    pub support_size: usize,
    pub support_bound_ok: bool,
    pub columns_two_level_ok: bool,
    pub column_pattern_ok: bool,
    pub phi_monotone_ok: bool,
}

impl StructureReport {
    pub fn all_ok(&self) -> bool {
        self.support_bound_ok && self.columns_two_level_ok && self.column_pattern_ok && self.phi_monotone_ok
    }
}

/// Matches `L*U+L*`.
fn is_staircase_pattern(col: &[Sig]) -> bool {
    let mut phase = 0; // 0: leading L, 1: U run, 2: trailing L
    for s in col {
        match (phase, s) {
            (0, Sig::L) | (2, Sig::L) | (1, Sig::U) => {}
            (0, Sig::U) => phase = 1,
            (1, Sig::L) => phase = 2,
            _ => return false,
        }
    }
    phase >= 1
}

/// First and last `U` row of a column.
fn u_span(col: &[Sig]) -> Option<(usize, usize)> {
    let first = col.iter().position(|s| *s == Sig::U)?;
    let last = col.iter().rposition(|s| *s == Sig::U)?;
    Some((first, last))
}

/// Checks the structure an optimal unbiased randomizer can be taken to
/// have: at most `2k` outputs, two-level columns whose signatures read
/// `L*U+L*` top to bottom, and U-spans that move strictly forward in the
/// partial order as the output value increases.
pub fn check_structure(matrix: &RandomizerMatrix, tol: f64) -> StructureReport {
    let sig = signature_of(matrix, tol);
    let k = matrix.inputs().len();
    let nonzero: Vec<usize> =
        (0..sig.columns()).filter(|&i| matrix.column(i).iter().any(|v| v.abs() > ZERO_ABS)).collect();
    let cols: Vec<Vec<Sig>> = nonzero.iter().map(|&i| sig.column(i)).collect();

    let columns_two_level_ok = cols.iter().all(|c| c.iter().all(|s| matches!(s, Sig::U | Sig::L)));
    let column_pattern_ok = cols.iter().all(|c| is_staircase_pattern(c));
    let spans: Vec<Option<(usize, usize)>> = cols.iter().map(|c| u_span(c)).collect();
    let phi_monotone_ok = spans.iter().all(Option::is_some)
        && spans.windows(2).all(|w| {
            let (a1, a2) = w[0].expect("checked");
            let (b1, b2) = w[1].expect("checked");
            a1 <= b1 && a2 <= b2 && (a1, a2) != (b1, b2)
        });
    StructureReport {
        support_size: nonzero.len(),
        support_bound_ok: nonzero.len() <= 2 * k,
        columns_two_level_ok,
        column_pattern_ok,
        phi_monotone_ok,
    }
}

#[derive(Debug, Clone)]
pub struct PruneOutcome {
    pub matrix: RandomizerMatrix,
    pub dropped_columns: usize,
    /// Largest per-row probability mass removed before renormalizing.
    pub max_row_mass_dropped: f64,
    /// Largest change of any row's expected output caused by pruning.
    pub bias_increase: f64,
}

/// Drops output columns whose prior-weighted mass `Σ_y p_y M[y][i]` is below
/// `threshold` and renormalizes rows. Without a prior, labels are weighted
/// uniformly.
pub fn prune_support(matrix: &RandomizerMatrix, prior: Option<&Prior>, threshold: f64) -> Result<PruneOutcome> {
    let k = matrix.inputs().len();
    let weights: Vec<f64> = match prior {
        Some(p) => p.probs().to_vec(),
        None => vec![1.0 / k as f64; k],
    };
    let n = matrix.outputs().len();
    let keep: Vec<bool> = (0..n)
        .map(|i| {
            let mass: f64 = matrix.probs().iter().zip(&weights).map(|(r, w)| w * r[i]).sum();
            let any = matrix.probs().iter().any(|r| r[i] > ZERO_ABS);
            any && mass >= threshold
        })
        .collect();
    let dropped_columns = keep.iter().filter(|k| !**k).count();
    if dropped_columns == 0 {
        return Ok(PruneOutcome {
            matrix: matrix.clone(),
            dropped_columns,
            max_row_mass_dropped: 0.0,
            bias_increase: 0.0,
        });
    }
    let max_row_mass_dropped = matrix
        .probs()
        .iter()
        .map(|r| r.iter().zip(&keep).filter(|(_, k)| !**k).map(|(p, _)| *p).sum::<f64>())
        .fold(0.0, f64::max);
    let pruned = matrix.retain_columns(&keep)?.renormalized()?;
    let bias_increase =
        matrix.expected_outputs().iter().zip(pruned.expected_outputs()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok(PruneOutcome { matrix: pruned, dropped_columns, max_row_mass_dropped, bias_increase })
}

/// A randomizer written as a list of two-level columns
/// `weight·v_S(y)`, `v_S(y) = 1 if y ∈ S else e^{-ε}`, each at a real output.
/// Unlike [`RandomizerMatrix`], outputs may repeat.
#[derive(Debug, Clone, PartialEq)]
pub struct StaircaseForm {
    pub inputs: LabelSet,
    pub epsilon: f64,
    /// Sorted by output, then by the first and last high label.
    pub columns: Vec<StaircaseColumn>,
}

fn span_of(members: &[bool]) -> (usize, usize) {
    let first = members.iter().position(|m| *m).unwrap_or(usize::MAX);
    let last = members.iter().rposition(|m| *m).unwrap_or(usize::MAX);
    (first, last)
}

impl StaircaseForm {
    pub fn new(inputs: LabelSet, epsilon: f64, mut columns: Vec<StaircaseColumn>) -> Self {
        columns.retain(|c| c.weight > 0.0 && c.members.iter().any(|m| *m));
        columns
            .sort_by(|a, b| a.output.total_cmp(&b.output).then_with(|| span_of(&a.members).cmp(&span_of(&b.members))));
        StaircaseForm { inputs, epsilon, columns }
    }

    /// Splits every column of `matrix` into nested two-level layers: the
    /// layer for threshold `t` holds the labels whose entry rises at least
    /// `t` above the column floor `e^{-ε}·max`.
    pub fn from_matrix(matrix: &RandomizerMatrix) -> Self {
        let low = (-matrix.epsilon()).exp();
        let mut columns = Vec::new();
        for (i, out) in matrix.outputs().values().iter().enumerate() {
            let col = matrix.column(i);
            let top = col.iter().copied().fold(0.0, f64::max);
            if top <= ZERO_ABS {
                continue;
            }
            let depth: Vec<f64> = col.iter().map(|v| ((v - low * top) / (1.0 - low)).max(0.0)).collect();
            let mut levels: Vec<f64> = depth.iter().copied().filter(|d| *d > 0.0).collect();
            levels.sort_by(f64::total_cmp);
            levels.dedup();
            let mut prev = 0.0;
            for level in levels {
                columns.push(StaircaseColumn {
                    output: *out,
                    members: depth.iter().map(|d| *d >= level).collect(),
                    weight: level - prev,
                });
                prev = level;
            }
        }
        Self::new(matrix.inputs().clone(), matrix.epsilon(), columns)
    }

    /// Pools all columns sharing a label subset into one column at their
    /// weighted mean output. Rows and expected outputs are unchanged and the
    /// squared-error loss does not increase.
    pub fn pooled(&self) -> Self {
        let mut pools: HashMap<&[bool], (f64, f64)> = HashMap::new();
        let mut order: Vec<&[bool]> = Vec::new();
        for c in &self.columns {
            let e = pools.entry(&c.members).or_insert_with(|| {
                order.push(&c.members);
                (0.0, 0.0)
            });
            e.0 += c.weight;
            e.1 += c.weight * c.output;
        }
        let columns = order
            .into_iter()
            .map(|m| {
                let (w, wy) = pools[m];
                StaircaseColumn { output: wy / w, members: m.to_vec(), weight: w }
            })
            .collect();
        Self::new(self.inputs.clone(), self.epsilon, columns)
    }

    fn column_probs(&self, c: &StaircaseColumn) -> Vec<f64> {
        let low = (-self.epsilon).exp();
        c.members.iter().map(|m| if *m { c.weight } else { c.weight * low }).collect()
    }

    /// Drops columns whose prior-weighted mass is below `threshold`.
    pub fn pruned(&self, prior: &Prior, threshold: f64) -> Self {
        let columns = self
            .columns
            .iter()
            .filter(|c| {
                let mass: f64 = self.column_probs(c).iter().zip(prior.probs()).map(|(a, b)| a * b).sum();
                mass >= threshold
            })
            .cloned()
            .collect();
        Self::new(self.inputs.clone(), self.epsilon, columns)
    }

    /// Noisy label loss `Σ_y p_y Σ_j M_j(y)·½(ŷ_j − y)²`.
    pub fn loss(&self, prior: &Prior) -> f64 {
        let ys = self.inputs.values();
        self.columns
            .iter()
            .map(|c| {
                self.column_probs(c)
                    .iter()
                    .zip(prior.probs())
                    .zip(ys)
                    .map(|((m, p), y)| p * m * 0.5 * (c.output - y) * (c.output - y))
                    .sum::<f64>()
            })
            .sum()
    }

    /// Matrix with rows renormalized; columns at equal outputs are summed.
    pub fn to_matrix(&self) -> Result<RandomizerMatrix> {
        let cols = self.columns.iter().map(|c| (c.output, self.column_probs(c))).collect();
        RandomizerMatrix::from_columns(self.inputs.clone(), cols, self.epsilon)?.renormalized()
    }

    /// The same four checks as [`check_structure`], read off the column
    /// list directly so that repeated outputs stay distinct columns.
    pub fn report(&self) -> StructureReport {
        let k = self.inputs.len();
        let sigs: Vec<Vec<Sig>> = self
            .columns
            .iter()
            .map(|c| {
                let all = c.members.iter().all(|m| *m);
                c.members.iter().map(|m| if *m || all { Sig::U } else { Sig::L }).collect()
            })
            .collect();
        let column_pattern_ok = sigs.iter().all(|c| is_staircase_pattern(c));
        let spans: Vec<(usize, usize)> = self.columns.iter().map(|c| span_of(&c.members)).collect();
        let phi_monotone_ok = spans.windows(2).all(|w| w[0].0 <= w[1].0 && w[0].1 <= w[1].1 && w[0] != w[1]);
        StructureReport {
            support_size: self.columns.len(),
            support_bound_ok: self.columns.len() <= 2 * k,
            columns_two_level_ok: true,
            column_pattern_ok,
            phi_monotone_ok,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::{LabelSet, OutputGrid};
    use crate::mechanisms::{dbrr_matrix, rr_on_bins_matrix};

    #[test]
    fn dbrr_signature() {
        let m = dbrr_matrix(&LabelSet::range(2), 2f64.ln()).unwrap();
        let s = signature_of(&m, 1e-9);
        assert_eq!(s.column_string(0), "UL");
        assert_eq!(s.column_string(1), "LU");
    }

    #[test]
    fn constant_column_is_all_u() {
        let m = RandomizerMatrix::new(
            LabelSet::range(3),
            OutputGrid::new(vec![0.0, 1.0]).unwrap(),
            vec![vec![0.5, 0.5]; 3],
            1.0,
        )
        .unwrap();
        let s = signature_of(&m, 1e-9);
        assert_eq!(s.column_string(0), "UUU");
        assert!(check_structure(&m, 1e-9).columns_two_level_ok);
    }

    #[test]
    fn dbrr_structure_all_true() {
        for k in [2, 3, 7] {
            for eps in [0.2, 1.0, 5.0] {
                let m = dbrr_matrix(&LabelSet::range(k), eps).unwrap();
                let r = check_structure(&m, 1e-9);
                assert!(r.all_ok(), "k={k} eps={eps}: {r:?}");
            }
        }
    }

    #[test]
    fn rr_on_bins_table_one_structure() {
        let m = rr_on_bins_matrix(&LabelSet::range(3), &[0.396, 0.72, 0.72], 0.5).unwrap();
        let r = check_structure(&m, 1e-9);
        assert!(r.columns_two_level_ok && r.support_bound_ok);
        assert_eq!(r.support_size, 2);
    }

    #[test]
    fn broken_pattern_detected() {
        let e = 1f64.exp();
        let (hi, lo) = (e / (2.0 * e), 1.0 / (2.0 * e));
        // Column 0 reads U, L, U top to bottom.
        let m = RandomizerMatrix::new(
            LabelSet::range(3),
            OutputGrid::new(vec![0.0, 1.0]).unwrap(),
            vec![vec![hi, 1.0 - hi], vec![lo, 1.0 - lo], vec![hi, 1.0 - hi]],
            1.0,
        )
        .unwrap();
        assert_eq!(signature_of(&m, 1e-9).column_string(0), "ULU");
        assert!(!check_structure(&m, 1e-9).column_pattern_ok);
    }

    #[test]
    fn interior_values_are_s() {
        let m = RandomizerMatrix::new(
            LabelSet::range(2),
            OutputGrid::new(vec![0.0, 1.0]).unwrap(),
            vec![vec![0.6, 0.4], vec![0.5, 0.5]],
            2.0,
        )
        .unwrap();
        let s = signature_of(&m, 1e-9);
        assert_eq!(s.column_string(0), "SS");
        assert!(!check_structure(&m, 1e-9).columns_two_level_ok);
    }

    #[test]
    fn prune_drops_zero_column_only() {
        let m = RandomizerMatrix::new(
            LabelSet::range(2),
            OutputGrid::new(vec![-1.0, 0.0, 2.0]).unwrap(),
            vec![vec![2.0 / 3.0, 0.0, 1.0 / 3.0], vec![1.0 / 3.0, 0.0, 2.0 / 3.0]],
            2f64.ln(),
        )
        .unwrap();
        let out = prune_support(&m, None, 1e-8).unwrap();
        assert_eq!(out.dropped_columns, 1);
        assert_eq!(out.matrix.outputs().values(), &[-1.0, 2.0]);
        assert_eq!(out.matrix.row(0), &[2.0 / 3.0, 1.0 / 3.0]);
        assert_eq!(out.bias_increase, 0.0);
    }

    #[test]
    fn prune_leaves_dbrr_alone() {
        let m = dbrr_matrix(&LabelSet::range(4), 0.5).unwrap();
        let out = prune_support(&m, None, 1e-8).unwrap();
        assert_eq!(out.matrix, m);
        assert_eq!(out.dropped_columns, 0);
    }

    #[test]
    fn staircase_form_round_trips_dbrr() {
        let m = dbrr_matrix(&LabelSet::range(3), 1.0).unwrap();
        let f = StaircaseForm::from_matrix(&m);
        assert_eq!(f.columns.len(), 3);
        assert!(f.report().all_ok());
        let back = f.to_matrix().unwrap();
        for (a, b) in back.probs().iter().flatten().zip(m.probs().iter().flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn layers_rebuild_a_mixed_column() {
        let e = 1f64.exp();
        let low = 1.0 / e;
        // Two staircase columns at the same output: {0} with weight 0.3 and
        // {0, 1} with weight 0.2.
        let col = [0.3 + 0.2, 0.3 * low + 0.2, 0.3 * low + 0.2 * low];
        let rest: Vec<f64> = col.iter().map(|c| 1.0 - c).collect();
        let m = RandomizerMatrix::new(
            LabelSet::range(3),
            OutputGrid::new(vec![0.0, 1.0]).unwrap(),
            (0..3).map(|y| vec![col[y], rest[y]]).collect(),
            1.0,
        )
        .unwrap();
        assert_eq!(signature_of(&m, 1e-9).column_string(0), "USL");
        let f = StaircaseForm::from_matrix(&m);
        let at_zero: Vec<&StaircaseColumn> = f.columns.iter().filter(|c| c.output == 0.0).collect();
        assert_eq!(at_zero.len(), 2);
        assert!(at_zero.iter().any(|c| c.members == [true, true, false] && (c.weight - 0.2).abs() < 1e-12));
        assert!(at_zero.iter().any(|c| c.members == [true, false, false] && (c.weight - 0.3).abs() < 1e-12));
    }

    #[test]
    fn pooling_keeps_rows_and_means() {
        let cols = vec![
            StaircaseColumn { output: -1.0, members: vec![true, false], weight: 0.2 },
            StaircaseColumn { output: 0.0, members: vec![true, false], weight: 0.3 },
        ];
        let f = StaircaseForm::new(LabelSet::range(2), 0.5, cols);
        let pooled = f.pooled();
        assert_eq!(pooled.columns.len(), 1);
        assert!((pooled.columns[0].output + 0.4).abs() < 1e-12);
        assert!((pooled.columns[0].weight - 0.5).abs() < 1e-12);
        let p = Prior::uniform(LabelSet::range(2));
        assert!(pooled.loss(&p) <= f.loss(&p));
    }
}

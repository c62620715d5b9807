use crate::error::{Error, Result};
use crate::loss::LossKind;
use crate::rng::RandomSource;

use super::data::{Dataset, Population};
use super::mechanism::LabelMechanism;
use super::model::Model;

/// Split of the noisy mini-batch gradient error
/// `∇L_Ŝ − ∇L_D = (a) + (b) + (c)`:
/// `a = ∇L_S − ∇L_D` (mini-batch sampling), `b = ∇L_S̃ − ∇L_S` (label
/// bias, with `S̃` carrying the expected noisy labels) and
/// `c = ∇L_Ŝ − ∇L_S̃` (zero-mean label noise).
#[derive(Debug, Clone, PartialEq)]
pub struct GradTerms {
    /// Present when a population was supplied.
    pub a: Option<Vec<f64>>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

/// Mean of `coef(i)·∇f(x_i)` over the rows of `data`, weighted by `weights`
/// when given.
fn weighted_grad(
    model: &Model,
    data: &Dataset,
    weights: Option<&[f64]>,
    mut coef: impl FnMut(usize, f64) -> Result<f64>,
) -> Result<Vec<f64>> {
    let n = model.params.len();
    let mut acc = vec![0.0; n];
    let mut g = vec![0.0; n];
    let uniform = 1.0 / data.len() as f64;
    for i in 0..data.len() {
        let pred = model.gradient(data.row(i), &mut g);
        let w = weights.map_or(uniform, |w| w[i]);
        let c = coef(i, pred)? * w;
        for (a, gi) in acc.iter_mut().zip(&g) {
            *a += c * gi;
        }
    }
    Ok(acc)
}

/// Computes the three terms at the current parameters for the batch
/// `(x_i, y_i)` with true labels. Term (b) uses the exact expected noisy
/// labels; term (c) uses one fresh sample per row.
pub fn grad_decomposition(
    model: &Model,
    batch: &Dataset,
    mechanism: &LabelMechanism,
    loss: LossKind,
    population: Option<&Population>,
    rng: &mut RandomSource,
) -> Result<GradTerms> {
    if batch.is_empty() {
        return Err(Error::Empty("empty batch".into()));
    }
    let expected: Vec<f64> = batch.y.iter().map(|&y| mechanism.expected(y)).collect::<Result<_>>()?;
    let sampled: Vec<f64> = batch.y.iter().map(|&y| mechanism.sample(y, rng)).collect::<Result<_>>()?;
    let y = &batch.y;
    let b = weighted_grad(model, batch, None, |i, f| Ok(loss.dpred(f, expected[i])? - loss.dpred(f, y[i])?))?;
    let c = weighted_grad(model, batch, None, |i, f| Ok(loss.dpred(f, sampled[i])? - loss.dpred(f, expected[i])?))?;
    let a = match population {
        Some(pop) => {
            let batch_grad = weighted_grad(model, batch, None, |i, f| loss.dpred(f, y[i]))?;
            let pop_grad =
                weighted_grad(model, &pop.points, Some(&pop.weights), |i, f| loss.dpred(f, pop.points.y[i]))?;
            Some(batch_grad.iter().zip(&pop_grad).map(|(s, d)| s - d).collect())
        }
        None => None,
    };
    Ok(GradTerms { a, b, c })
}

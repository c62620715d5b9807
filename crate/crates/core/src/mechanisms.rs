//! Baseline ε-DP label mechanisms.
//!
//! Two families live here: additive noise (Laplace and staircase, each with a
//! discrete and a continuous variant, optionally clipped), and finite
//! randomizers expressed as a [`RandomizerMatrix`] (randomized response,
//! RR-on-Bins, debiased RR). Unbiased randomized rounding onto a grid is also
//! provided since every continuous-label path goes through it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{LabelSet, OutputGrid, Prior};
use crate::randomizer::RandomizerMatrix;
use crate::rng::RandomSource;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Support {
    Discrete,
    #[default]
    Continuous,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Laplace,
    Staircase,
}

/// Noise distribution of an additive mechanism. Staircase parameters left as
/// `None` are resolved to the variance-minimizing choice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum NoiseKind {
    ContinuousLaplace,
    DiscreteLaplace,
    ContinuousStaircase { gamma: Option<f64> },
    DiscreteStaircase { r: Option<u64> },
}

impl NoiseKind {
    pub fn new(family: Family, support: Support) -> Self {
        match (family, support) {
            (Family::Laplace, Support::Continuous) => NoiseKind::ContinuousLaplace,
            (Family::Laplace, Support::Discrete) => NoiseKind::DiscreteLaplace,
            (Family::Staircase, Support::Continuous) => NoiseKind::ContinuousStaircase { gamma: None },
            (Family::Staircase, Support::Discrete) => NoiseKind::DiscreteStaircase { r: None },
        }
    }

    pub fn family(&self) -> Family {
        match self {
            NoiseKind::ContinuousLaplace | NoiseKind::DiscreteLaplace => Family::Laplace,
            _ => Family::Staircase,
        }
    }

    pub fn support(&self) -> Support {
        match self {
            NoiseKind::ContinuousLaplace | NoiseKind::ContinuousStaircase { .. } => Support::Continuous,
            _ => Support::Discrete,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipRange {
    pub lo: f64,
    pub hi: f64,
}

impl ClipRange {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo <= hi) {
            return Err(Error::Parameter(format!("clip range needs lo <= hi, got [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi })
    }
}

pub fn clip(value: f64, range: ClipRange) -> f64 {
    value.max(range.lo).min(range.hi)
}

/// `γ = 1 / (1 + e^{ε/2})`
pub fn default_staircase_gamma(epsilon: f64) -> f64 {
    1.0 / (1.0 + (epsilon / 2.0).exp())
}

/// Additive-noise mechanism with fully resolved parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdditiveNoise {
    kind: NoiseKind,
    epsilon: f64,
    sensitivity: f64,
    /// Staircase step parameter: γ (continuous) or r (discrete, stored as f64).
    step: f64,
}

fn is_integer(x: f64) -> bool {
    x.is_finite() && x.fract() == 0.0
}

impl AdditiveNoise {
    pub fn new(kind: NoiseKind, epsilon: f64, sensitivity: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::Parameter(format!("epsilon must be positive, got {epsilon}")));
        }
        if !(sensitivity > 0.0 && sensitivity.is_finite()) {
            return Err(Error::Parameter(format!("sensitivity must be positive, got {sensitivity}")));
        }
        if kind.support() == Support::Discrete && !is_integer(sensitivity) {
            return Err(Error::Parameter(format!("discrete noise needs an integer sensitivity, got {sensitivity}")));
        }
        let step = match kind {
            NoiseKind::ContinuousLaplace | NoiseKind::DiscreteLaplace => 0.0,
            NoiseKind::ContinuousStaircase { gamma } => {
                let g = gamma.unwrap_or_else(|| default_staircase_gamma(epsilon));
                if !(g > 0.0 && g < 1.0) {
                    return Err(Error::Parameter(format!("staircase gamma must be in (0,1), got {g}")));
                }
                g
            }
            NoiseKind::DiscreteStaircase { r } => {
                let delta = sensitivity as u64;
                let r = match r {
                    Some(r) => r,
                    None => best_discrete_staircase_r(epsilon, delta),
                };
                if r < 1 || r > delta {
                    return Err(Error::Parameter(format!("staircase r must be in [1, {delta}], got {r}")));
                }
                r as f64
            }
        };
        Ok(Self { kind, epsilon, sensitivity, step })
    }

    pub fn kind(&self) -> NoiseKind {
        self.kind
    }

    pub fn gamma(&self) -> Option<f64> {
        matches!(self.kind, NoiseKind::ContinuousStaircase { .. }).then_some(self.step)
    }

    pub fn r(&self) -> Option<u64> {
        matches!(self.kind, NoiseKind::DiscreteStaircase { .. }).then_some(self.step as u64)
    }

    fn decay(&self) -> f64 {
        (-self.epsilon).exp()
    }

    /// Laplace scale `Δ/ε`.
    fn scale(&self) -> f64 {
        self.sensitivity / self.epsilon
    }

    pub fn sample_noise(&self, rng: &mut RandomSource) -> f64 {
        match self.kind {
            NoiseKind::ContinuousLaplace => rng.sign() * self.scale() * -rng.uniform_open().ln(),
            NoiseKind::DiscreteLaplace => {
                // Difference of two i.i.d. geometrics is two-sided geometric.
                let q = (-1.0 / self.scale()).exp();
                rng.geometric(q) as f64 - rng.geometric(q) as f64
            }
            NoiseKind::ContinuousStaircase { .. } => {
                let (g, b, d) = (self.step, self.decay(), self.sensitivity);
                let k = rng.geometric(b) as f64;
                let high = rng.bernoulli(g / (g + (1.0 - g) * b));
                let u = rng.uniform();
                let offset = if high { u * g * d } else { g * d + u * (1.0 - g) * d };
                rng.sign() * (k * d + offset)
            }
            NoiseKind::DiscreteStaircase { .. } => self.sample_discrete_staircase(rng),
        }
    }

    fn sample_discrete_staircase(&self, rng: &mut RandomSource) -> f64 {
        let b = self.decay();
        let d = self.sensitivity;
        let r = self.step;
        let a = discrete_staircase_a(b, r, d);
        // |X| decomposes into a period k and an offset j in [0, Δ).
        // Period 0 holds j = 0 once and every j > 0 twice (both signs).
        let m0 = a * (2.0 * r - 1.0 + 2.0 * b * (d - r));
        let (k, j) = if rng.uniform() < m0 {
            let w0 = [1.0, 2.0 * (r - 1.0), 2.0 * b * (d - r)];
            let j = match rng.categorical(&w0) {
                0 => 0.0,
                1 => 1.0 + rng.index((r - 1.0) as usize) as f64,
                _ => r + rng.index((d - r) as usize) as f64,
            };
            (0.0, j)
        } else {
            let k = 1.0 + rng.geometric(b) as f64;
            let j = if rng.bernoulli(r / (r + b * (d - r))) {
                rng.index(r as usize) as f64
            } else {
                r + rng.index((d - r) as usize) as f64
            };
            (k, j)
        };
        let mag = k * d + j;
        if mag == 0.0 {
            0.0
        } else {
            rng.sign() * mag
        }
    }

    /// Probability mass at integer `i` for discrete kinds.
    pub fn pmf(&self, i: i64) -> f64 {
        let b = self.decay();
        match self.kind {
            NoiseKind::DiscreteLaplace => {
                let q = (-1.0 / self.scale()).exp();
                (1.0 - q) / (1.0 + q) * q.powi(i.unsigned_abs() as i32)
            }
            NoiseKind::DiscreteStaircase { .. } => {
                let d = self.sensitivity as u64;
                let m = i.unsigned_abs();
                let (k, j) = (m / d, m % d);
                let a = discrete_staircase_a(b, self.step, self.sensitivity);
                let w = if (j as f64) < self.step { 1.0 } else { b };
                a * w * b.powi(k as i32)
            }
            _ => 0.0,
        }
    }

    /// CDF of the noise for continuous kinds.
    pub fn cdf(&self, x: f64) -> f64 {
        if x < 0.0 {
            return 1.0 - self.cdf(-x);
        }
        match self.kind {
            NoiseKind::ContinuousLaplace => 1.0 - 0.5 * (-x / self.scale()).exp(),
            NoiseKind::ContinuousStaircase { .. } => {
                let (g, b, d) = (self.step, self.decay(), self.sensitivity);
                let a = continuous_staircase_a(b, g, d);
                let periods = (x / d).floor();
                let per_period = a * d * (g + b * (1.0 - g));
                let full = per_period * (1.0 - b.powf(periods)) / (1.0 - b);
                let t = x - periods * d;
                let partial = b.powf(periods) * a * (t.min(g * d) + b * (t - g * d).max(0.0));
                0.5 + full + partial
            }
            _ => {
                // Discrete kinds: sum the mass function.
                let n = x.floor() as i64;
                0.5 + 0.5 * self.pmf(0) + (1..=n).map(|i| self.pmf(i)).sum::<f64>()
            }
        }
    }

    /// Exact noise variance.
    pub fn variance(&self) -> f64 {
        let b = self.decay();
        match self.kind {
            NoiseKind::ContinuousLaplace => 2.0 * self.scale().powi(2),
            NoiseKind::DiscreteLaplace => {
                let q = (-1.0 / self.scale()).exp();
                2.0 * q / (1.0 - q).powi(2)
            }
            NoiseKind::ContinuousStaircase { .. } => continuous_staircase_variance(b, self.step, self.sensitivity),
            NoiseKind::DiscreteStaircase { .. } => discrete_staircase_variance(b, self.step, self.sensitivity),
        }
    }

    /// Largest noise magnitude worth summing over for discrete kinds.
    fn discrete_horizon(&self) -> i64 {
        let per_unit = match self.kind {
            NoiseKind::DiscreteLaplace => 1.0 / self.scale(),
            _ => self.epsilon / self.sensitivity,
        };
        (40.0 / per_unit).ceil() as i64 + self.sensitivity as i64
    }

    /// `E[clip(y + noise)]`, computed exactly for discrete kinds and by
    /// quadrature of the survival function for continuous kinds.
    pub fn expected_clipped(&self, y: f64, range: ClipRange) -> f64 {
        match self.kind.support() {
            Support::Discrete => {
                let h = self.discrete_horizon();
                (-h..=h).map(|i| self.pmf(i) * clip(y + i as f64, range)).sum()
            }
            Support::Continuous => {
                // E[clip(Z)] = lo + ∫_lo^hi P(Z > t) dt
                let f = |t: f64| 1.0 - self.cdf(t - y);
                range.lo + simpson(f, range.lo, range.hi, 20_000)
            }
        }
    }
}

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    if b <= a {
        return 0.0;
    }
    let n = n + n % 2;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + h * i as f64);
    }
    s * h / 3.0
}

fn continuous_staircase_a(b: f64, gamma: f64, delta: f64) -> f64 {
    (1.0 - b) / (2.0 * delta * (gamma + b * (1.0 - gamma)))
}

fn discrete_staircase_a(b: f64, r: f64, delta: f64) -> f64 {
    (1.0 - b) / (2.0 * r + 2.0 * b * (delta - r) - (1.0 - b))
}

/// Sums of `b^k`, `k b^k`, `k² b^k` over `k >= 0`.
fn geometric_moments(b: f64) -> (f64, f64, f64) {
    let s0 = 1.0 / (1.0 - b);
    let s1 = b / (1.0 - b).powi(2);
    let s2 = b * (1.0 + b) / (1.0 - b).powi(3);
    (s0, s1, s2)
}

fn continuous_staircase_variance(b: f64, gamma: f64, delta: f64) -> f64 {
    let a = continuous_staircase_a(b, gamma, delta);
    let (s0, s1, s2) = geometric_moments(b);
    // ∫ over [kΔ + u, kΔ + v) of x² = Σ_k b^k [Δ²k²(v-u) + Δk(v²-u²) + (v³-u³)/3]
    let seg = |u: f64, v: f64, w: f64| {
        w * (delta * delta * s2 * (v - u) + delta * s1 * (v * v - u * u) + s0 * (v.powi(3) - u.powi(3)) / 3.0)
    };
    let gd = gamma * delta;
    2.0 * a * (seg(0.0, gd, 1.0) + seg(gd, delta, b))
}

fn discrete_staircase_variance(b: f64, r: f64, delta: f64) -> f64 {
    let a = discrete_staircase_a(b, r, delta);
    let (s0, s1, s2) = geometric_moments(b);
    let d = delta;
    let mut total = 0.0;
    for j in 0..(delta as u64) {
        let jf = j as f64;
        let w = if jf < r { 1.0 } else { b };
        total += w * (d * d * s2 + 2.0 * d * jf * s1 + jf * jf * s0);
    }
    2.0 * a * total
}

/// Integer `r ∈ [1, Δ]` minimizing the discrete staircase variance.
pub fn best_discrete_staircase_r(epsilon: f64, delta: u64) -> u64 {
    let b = (-epsilon).exp();
    (1..=delta.max(1))
        .min_by(|x, y| {
            discrete_staircase_variance(b, *x as f64, delta as f64).total_cmp(&discrete_staircase_variance(
                b,
                *y as f64,
                delta as f64,
            ))
        })
        .unwrap_or(1)
}

/// Returns `y + noise`. Discrete kinds require integer `y`.
pub fn additive_noise(y: f64, kind: NoiseKind, epsilon: f64, sensitivity: f64, rng: &mut RandomSource) -> Result<f64> {
    let mech = AdditiveNoise::new(kind, epsilon, sensitivity)?;
    if kind.support() == Support::Discrete && !is_integer(y) {
        return Err(Error::Parameter(format!("discrete noise needs an integer label, got {y}")));
    }
    Ok(y + mech.sample_noise(rng))
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if epsilon > 0.0 && epsilon.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter(format!("epsilon must be positive and finite, got {epsilon}")))
    }
}

/// `q`-ary randomized response over the labels themselves.
pub fn rr_matrix(labels: &LabelSet, epsilon: f64) -> Result<RandomizerMatrix> {
    check_epsilon(epsilon)?;
    let q = labels.len();
    let e = epsilon.exp();
    let (stay, other) = (e / (e + q as f64 - 1.0), 1.0 / (e + q as f64 - 1.0));
    let probs = (0..q).map(|y| (0..q).map(|i| if i == y { stay } else { other }).collect()).collect();
    RandomizerMatrix::new(labels.clone(), OutputGrid::new(labels.values().to_vec())?, probs, epsilon)
}

/// Randomized response over the distinct values of `phi`, where `phi[y]` is
/// the bin value of `labels[y]`.
pub fn rr_on_bins_matrix(labels: &LabelSet, phi: &[f64], epsilon: f64) -> Result<RandomizerMatrix> {
    check_epsilon(epsilon)?;
    if phi.len() != labels.len() {
        return Err(Error::Parameter(format!("bin map covers {} of {} labels", phi.len(), labels.len())));
    }
    let mut bins: Vec<f64> = phi.to_vec();
    bins.sort_by(f64::total_cmp);
    bins.dedup();
    let outputs = OutputGrid::new(bins)?;
    let m = outputs.len() as f64;
    let e = epsilon.exp();
    let (stay, other) = (e / (e + m - 1.0), 1.0 / (e + m - 1.0));
    let probs = phi
        .iter()
        .map(|target| outputs.values().iter().map(|v| if v == target { stay } else { other }).collect())
        .collect();
    RandomizerMatrix::new(labels.clone(), outputs, probs, epsilon)
}

/// Noisy-label-loss-optimal RR-on-Bins over monotone bin maps, for squared
/// loss. Returns the bin map (one value per label) and its matrix.
///
/// For a fixed number of bins `m` the loss separates over bins, each bin's
/// best value being a weighted mean, so a segment DP over contiguous label
/// ranges is exact for every `m`.
pub fn optimal_rr_on_bins(prior: &Prior, epsilon: f64) -> Result<(Vec<f64>, RandomizerMatrix)> {
    check_epsilon(epsilon)?;
    let y = prior.labels().values();
    let p = prior.probs();
    let k = y.len();
    let e = epsilon.exp();

    // prefix sums of p, p·y, p·y²
    let mut c0 = vec![0.0; k + 1];
    let mut c1 = vec![0.0; k + 1];
    let mut c2 = vec![0.0; k + 1];
    for t in 0..k {
        c0[t + 1] = c0[t] + p[t];
        c1[t + 1] = c1[t] + p[t] * y[t];
        c2[t + 1] = c2[t] + p[t] * y[t] * y[t];
    }

    let mut best: Option<(f64, Vec<(usize, usize)>)> = None;
    for m in 1..=k {
        let stay = e / (e + m as f64 - 1.0);
        let other = 1.0 / (e + m as f64 - 1.0);
        // Cost of a bin covering labels [a, b): the bin collects `stay` mass
        // from its own labels and `other` mass from all the rest.
        let seg_cost = |a: usize, b: usize| -> f64 {
            let s = stay - other;
            let w0 = other * c0[k] + s * (c0[b] - c0[a]);
            let w1 = other * c1[k] + s * (c1[b] - c1[a]);
            let w2 = other * c2[k] + s * (c2[b] - c2[a]);
            if w0 <= 0.0 {
                return 0.0;
            }
            0.5 * (w2 - w1 * w1 / w0)
        };
        // dp[j][t]: best cost covering the first t labels with j bins.
        let inf = f64::INFINITY;
        let mut dp = vec![vec![inf; k + 1]; m + 1];
        let mut arg = vec![vec![0usize; k + 1]; m + 1];
        dp[0][0] = 0.0;
        for j in 1..=m {
            for t in j..=k {
                for s in (j - 1)..t {
                    let c = dp[j - 1][s] + seg_cost(s, t);
                    if c < dp[j][t] {
                        dp[j][t] = c;
                        arg[j][t] = s;
                    }
                }
            }
        }
        let cost = dp[m][k];
        if best.as_ref().map_or(true, |(b, _)| cost < *b) {
            let mut segs = Vec::with_capacity(m);
            let mut t = k;
            for j in (1..=m).rev() {
                let s = arg[j][t];
                segs.push((s, t));
                t = s;
            }
            segs.reverse();
            best = Some((cost, segs));
        }
    }
    let (_, segs) = best.expect("k >= 1");
    let m = segs.len() as f64;
    let stay = e / (e + m - 1.0);
    let other = 1.0 / (e + m - 1.0);
    let mut phi = vec![0.0; k];
    for &(a, b) in &segs {
        let s = stay - other;
        let w0 = other * c0[k] + s * (c0[b] - c0[a]);
        let w1 = other * c1[k] + s * (c1[b] - c1[a]);
        let v = if w0 > 0.0 { w1 / w0 } else { 0.5 * (y[a] + y[b - 1]) };
        phi[a..b].iter_mut().for_each(|x| *x = v);
    }
    // Bins with equal weighted means would collapse into one output; that
    // never beats the DP optimum, but keep the map consistent regardless.
    let matrix = rr_on_bins_matrix(prior.labels(), &phi, epsilon)?;
    Ok((phi, matrix))
}

/// Debiased relabelling `Φ(y) = ((e^ε + k − 1)·y − Σy') / (e^ε − 1)`.
pub fn dbrr_outputs(labels: &LabelSet, epsilon: f64) -> Vec<f64> {
    let e = epsilon.exp();
    let k = labels.len() as f64;
    let s = labels.sum();
    let denom = epsilon.exp_m1();
    labels.values().iter().map(|y| ((e + k - 1.0) * y - s) / denom).collect()
}

/// Randomized response on the debiased relabelling; exactly unbiased.
pub fn dbrr_matrix(labels: &LabelSet, epsilon: f64) -> Result<RandomizerMatrix> {
    check_epsilon(epsilon)?;
    if labels.len() < 2 {
        return Err(Error::Parameter("debiased RR needs at least two labels".into()));
    }
    let q = labels.len();
    let e = epsilon.exp();
    let (stay, other) = (e / (e + q as f64 - 1.0), 1.0 / (e + q as f64 - 1.0));
    let probs = (0..q).map(|y| (0..q).map(|i| if i == y { stay } else { other }).collect()).collect();
    RandomizerMatrix::new(labels.clone(), OutputGrid::new(dbrr_outputs(labels, epsilon))?, probs, epsilon)
}

/// The two-point law of unbiased randomized rounding: `[(index, prob); 2]`
/// over grid neighbours of `y`. On-grid points get a single index twice with
/// the full mass on the first slot.
pub fn urr_weights(y: f64, grid: &OutputGrid) -> Result<[(usize, f64); 2]> {
    let (lo, hi) = grid.bracket(y)?;
    if lo == hi {
        return Ok([(lo, 1.0), (hi, 0.0)]);
    }
    let (y1, y2) = (grid.values()[lo], grid.values()[hi]);
    let p_lo = (y2 - y) / (y2 - y1);
    Ok([(lo, p_lo), (hi, 1.0 - p_lo)])
}

/// Unbiased randomized rounding of `y` onto `grid`.
pub fn urr(y: f64, grid: &OutputGrid, rng: &mut RandomSource) -> Result<f64> {
    let [(lo, p_lo), (hi, _)] = urr_weights(y, grid)?;
    if lo == hi {
        return Ok(grid.values()[lo]);
    }
    let idx = if rng.uniform() < p_lo { lo } else { hi };
    Ok(grid.values()[idx])
}

/// Follows `matrix` with unbiased randomized rounding onto `grid`. The result
/// is ε-DP at the same level (post-processing) and keeps every expected output.
/// Outputs within rounding error of the grid ends are snapped onto them.
pub fn round_onto_grid(matrix: &RandomizerMatrix, grid: &OutputGrid) -> Result<RandomizerMatrix> {
    let slack = 1e-9 * (grid.max() - grid.min()).max(1.0);
    let mut weights = Vec::with_capacity(matrix.outputs().len());
    for &o in matrix.outputs().values() {
        let o = if o < grid.min() && o >= grid.min() - slack {
            grid.min()
        } else if o > grid.max() && o <= grid.max() + slack {
            grid.max()
        } else {
            o
        };
        weights.push(urr_weights(o, grid)?);
    }
    let probs = matrix
        .probs()
        .iter()
        .map(|row| {
            let mut out = vec![0.0; grid.len()];
            for (q, w) in row.iter().zip(&weights) {
                for (idx, p) in w {
                    out[*idx] += q * p;
                }
            }
            out
        })
        .collect();
    RandomizerMatrix::new(matrix.inputs().clone(), grid.clone(), probs, matrix.epsilon())
}

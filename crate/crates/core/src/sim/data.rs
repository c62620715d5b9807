use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{LabelSet, OutputGrid};
use crate::mechanisms::urr_weights;
use crate::rng::RandomSource;

/// How labels are drawn given features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum NoiseModel {
    /// Features are one-hot buckets drawn with `bucket_weights`; the label
    /// of bucket `x` follows `conditionals[x]` over the label set.
    Categorical { bucket_weights: Vec<f64>, conditionals: Vec<Vec<f64>> },
    /// Features are uniform on `[0, 1]^d`. The label is
    /// `w·x + intercept + U(−h, h)`, clipped into the label range and then
    /// rounded onto the label set by unbiased randomized rounding.
    LinearRounded { noise_halfwidth: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub feature_count: usize,
    /// Used by the linear noise model; may be empty for the categorical one.
    #[serde(default)]
    pub true_weights: Vec<f64>,
    #[serde(default)]
    pub intercept: f64,
    pub label_set: Vec<f64>,
    pub noise: NoiseModel,
    pub sample_count: usize,
}

impl SyntheticSpec {
    /// The two-bucket example over labels {0, 1, 2}.
    pub fn table1(sample_count: usize) -> Self {
        Self {
            feature_count: 2,
            true_weights: Vec::new(),
            intercept: 0.0,
            label_set: vec![0.0, 1.0, 2.0],
            noise: NoiseModel::Categorical {
                bucket_weights: vec![0.5, 0.5],
                conditionals: vec![vec![0.7, 0.2, 0.1], vec![0.5, 0.3, 0.2]],
            },
            sample_count,
        }
    }

    /// Ten labels {0, …, 9}, five uniform features and a linear mean that
    /// stays inside the label range, so `E[y | x] = w·x + intercept`.
    pub fn linear_ten(sample_count: usize) -> Self {
        Self {
            feature_count: 5,
            true_weights: vec![2.0, 1.5, 1.0, 1.0, 0.5],
            intercept: 1.5,
            label_set: (0..10).map(f64::from).collect(),
            noise: NoiseModel::LinearRounded { noise_halfwidth: 1.0 },
            sample_count,
        }
    }

    pub fn labels(&self) -> Result<LabelSet> {
        LabelSet::new(self.label_set.clone())
    }

    pub fn validate(&self) -> Result<()> {
        let labels = self.labels()?;
        if self.feature_count == 0 {
            return Err(Error::Parameter("feature_count must be positive".into()));
        }
        match &self.noise {
            NoiseModel::Categorical { bucket_weights, conditionals } => {
                if bucket_weights.len() != self.feature_count || conditionals.len() != self.feature_count {
                    return Err(Error::Parameter("one weight and one conditional per bucket required".into()));
                }
                let ok = |w: &[f64]| w.iter().all(|v| v.is_finite() && *v >= 0.0) && w.iter().sum::<f64>() > 0.0;
                if !ok(bucket_weights) {
                    return Err(Error::Parameter("bucket weights must be nonnegative with positive sum".into()));
                }
                for c in conditionals {
                    if c.len() != labels.len() || !ok(c) {
                        return Err(Error::Parameter("each conditional needs one nonnegative weight per label".into()));
                    }
                }
            }
            NoiseModel::LinearRounded { noise_halfwidth } => {
                if self.true_weights.len() != self.feature_count {
                    return Err(Error::Parameter(format!(
                        "{} true weights for {} features",
                        self.true_weights.len(),
                        self.feature_count
                    )));
                }
                if !(noise_halfwidth.is_finite() && *noise_halfwidth >= 0.0) {
                    return Err(Error::Parameter("noise_halfwidth must be nonnegative".into()));
                }
                if labels.len() < 2 {
                    return Err(Error::Parameter("the linear model needs at least two labels".into()));
                }
            }
        }
        Ok(())
    }

    /// Exact `E[y | x]`.
    pub fn bayes(&self) -> Result<BayesPredictor> {
        self.validate()?;
        let labels = self.labels()?;
        Ok(match &self.noise {
            NoiseModel::Categorical { conditionals, .. } => BayesPredictor::Buckets(
                conditionals
                    .iter()
                    .map(|c| {
                        let s: f64 = c.iter().sum();
                        c.iter().zip(labels.values()).map(|(p, y)| p * y).sum::<f64>() / s
                    })
                    .collect(),
            ),
            NoiseModel::LinearRounded { noise_halfwidth } => BayesPredictor::Linear {
                weights: self.true_weights.clone(),
                intercept: self.intercept,
                halfwidth: *noise_halfwidth,
                lo: labels.min(),
                hi: labels.max(),
            },
        })
    }

    /// Exact conditional distribution of the label given `x`.
    pub fn label_distribution(&self, x: &[f64]) -> Result<Vec<f64>> {
        let labels = self.labels()?;
        match &self.noise {
            NoiseModel::Categorical { conditionals, .. } => {
                let c = &conditionals[bucket_of(x)];
                let s: f64 = c.iter().sum();
                Ok(c.iter().map(|v| v / s).collect())
            }
            NoiseModel::LinearRounded { noise_halfwidth } => {
                let grid = OutputGrid::new(labels.values().to_vec())?;
                let m = linear_mean(&self.true_weights, self.intercept, x);
                let mut out = vec![0.0; labels.len()];
                let mut add = |z: f64, w: f64| -> Result<()> {
                    for (idx, p) in urr_weights(z.clamp(labels.min(), labels.max()), &grid)? {
                        out[idx] += w * p;
                    }
                    Ok(())
                };
                if *noise_halfwidth == 0.0 {
                    add(m, 1.0)?;
                } else {
                    // Midpoint rule over the uniform noise.
                    let n = 4096;
                    for i in 0..n {
                        let u = -noise_halfwidth + (2.0 * noise_halfwidth) * (i as f64 + 0.5) / n as f64;
                        add(m + u, 1.0 / n as f64)?;
                    }
                }
                Ok(out)
            }
        }
    }
}

fn bucket_of(x: &[f64]) -> usize {
    x.iter().position(|v| *v == 1.0).unwrap_or(0)
}

fn linear_mean(w: &[f64], b: f64, x: &[f64]) -> f64 {
    w.iter().zip(x).map(|(a, c)| a * c).sum::<f64>() + b
}

/// `E[clip(m + U(−h, h), lo, hi)]`.
fn clipped_uniform_mean(m: f64, h: f64, lo: f64, hi: f64) -> f64 {
    if h == 0.0 {
        return m.clamp(lo, hi);
    }
    let (a, b) = (m - h, m + h);
    // Integral of clip(z) over [a, b], split at lo and hi.
    let seg = |s: f64, t: f64, f: &dyn Fn(f64, f64) -> f64| if t > s { f(s, t) } else { 0.0 };
    let below = seg(a, b.min(lo), &|s, t| lo * (t - s));
    let above = seg(a.max(hi), b, &|s, t| hi * (t - s));
    let inside = seg(a.max(lo), b.min(hi), &|s, t| 0.5 * (t * t - s * s));
    (below + above + inside) / (2.0 * h)
}

/// Closed-form `E[y | x]` of a [`SyntheticSpec`].
#[derive(Debug, Clone, PartialEq)]
pub enum BayesPredictor {
    Buckets(Vec<f64>),
    Linear { weights: Vec<f64>, intercept: f64, halfwidth: f64, lo: f64, hi: f64 },
}

impl BayesPredictor {
    pub fn predict(&self, x: &[f64]) -> f64 {
        match self {
            BayesPredictor::Buckets(means) => means[bucket_of(x)],
            BayesPredictor::Linear { weights, intercept, halfwidth, lo, hi } => {
                clipped_uniform_mean(linear_mean(weights, *intercept, x), *halfwidth, *lo, *hi)
            }
        }
    }
}

/// Row-major features with one label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl Dataset {
    pub fn new(dim: usize, x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if dim == 0 || x.len() != dim * y.len() {
            return Err(Error::Structure(format!("{} feature values for {} rows of width {dim}", x.len(), y.len())));
        }
        Ok(Self { dim, x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    /// Same features with different labels.
    pub fn with_labels(&self, y: Vec<f64>) -> Result<Self> {
        Self::new(self.dim, self.x.clone(), y)
    }

    /// Rows `idx` as a new dataset.
    pub fn subset(&self, idx: &[usize]) -> Self {
        let mut x = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            x.extend_from_slice(self.row(i));
        }
        Self { dim: self.dim, x, y: idx.iter().map(|&i| self.y[i]).collect() }
    }
}

/// Draws `spec.sample_count` i.i.d. rows.
pub fn generate_synthetic(spec: &SyntheticSpec, rng: &mut RandomSource) -> Result<(Dataset, BayesPredictor)> {
    generate_rows(spec, spec.sample_count, rng)
}

pub fn generate_rows(spec: &SyntheticSpec, n: usize, rng: &mut RandomSource) -> Result<(Dataset, BayesPredictor)> {
    let bayes = spec.bayes()?;
    let labels = spec.labels()?;
    let d = spec.feature_count;
    let mut x = Vec::with_capacity(n * d);
    let mut y = Vec::with_capacity(n);
    match &spec.noise {
        NoiseModel::Categorical { bucket_weights, conditionals } => {
            for _ in 0..n {
                let b = rng.categorical(bucket_weights);
                x.extend((0..d).map(|j| if j == b { 1.0 } else { 0.0 }));
                y.push(labels.values()[rng.categorical(&conditionals[b])]);
            }
        }
        NoiseModel::LinearRounded { noise_halfwidth } => {
            let grid = OutputGrid::new(labels.values().to_vec())?;
            for _ in 0..n {
                let start = x.len();
                x.extend((0..d).map(|_| rng.uniform()));
                let m = linear_mean(&spec.true_weights, spec.intercept, &x[start..]);
                let z = (m + noise_halfwidth * (2.0 * rng.uniform() - 1.0)).clamp(labels.min(), labels.max());
                let [(lo, p_lo), (hi, _)] = urr_weights(z, &grid)?;
                let idx = if lo == hi || rng.uniform() < p_lo { lo } else { hi };
                y.push(labels.values()[idx]);
            }
        }
    }
    Ok((Dataset::new(d, x, y)?, bayes))
}

/// Weighted feature points with their exact conditional mean labels; the
/// population gradient is an exact finite sum over them.
#[derive(Debug, Clone)]
pub struct Population {
    pub points: Dataset,
    pub weights: Vec<f64>,
}

impl Population {
    /// Exact for categorical specs; for the linear model, `n` sampled feature
    /// points with exact conditional means.
    pub fn of(spec: &SyntheticSpec, n: usize, rng: &mut RandomSource) -> Result<Self> {
        let bayes = spec.bayes()?;
        match &spec.noise {
            NoiseModel::Categorical { bucket_weights, .. } => {
                let d = spec.feature_count;
                let s: f64 = bucket_weights.iter().sum();
                let x: Vec<f64> = (0..d).flat_map(|b| (0..d).map(move |j| if j == b { 1.0 } else { 0.0 })).collect();
                let y = (0..d).map(|b| bayes.predict(&x[b * d..(b + 1) * d])).collect();
                Ok(Self { points: Dataset::new(d, x, y)?, weights: bucket_weights.iter().map(|w| w / s).collect() })
            }
            NoiseModel::LinearRounded { .. } => {
                let (mut data, _) = generate_rows(spec, n, rng)?;
                data.y = (0..data.len()).map(|i| bayes.predict(data.row(i))).collect();
                Ok(Self { points: data, weights: vec![1.0 / n as f64; n] })
            }
        }
    }
}

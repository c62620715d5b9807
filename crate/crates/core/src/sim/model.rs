use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::loss::LossKind;
use crate::rng::RandomSource;

/// Smallest prediction the positive link returns.
pub const POSITIVE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    #[default]
    Linear,
    /// One tanh hidden layer.
    Mlp { hidden: usize },
}

/// Map from the raw model output to a prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Link {
    Identity,
    /// `softplus`, floored at [`POSITIVE_FLOOR`]; used for Poisson loss.
    Softplus,
}

impl Link {
    pub fn for_loss(loss: LossKind) -> Self {
        match loss {
            LossKind::Squared => Link::Identity,
            LossKind::Poisson => Link::Softplus,
        }
    }

    pub fn apply(self, raw: f64) -> f64 {
        match self {
            Link::Identity => raw,
            Link::Softplus => softplus(raw).max(POSITIVE_FLOOR),
        }
    }

    pub fn derivative(self, raw: f64) -> f64 {
        match self {
            Link::Identity => 1.0,
            Link::Softplus => sigmoid(raw),
        }
    }

    /// Raw output whose prediction is `pred`.
    pub fn inverse(self, pred: f64) -> f64 {
        match self {
            Link::Identity => pred,
            Link::Softplus => {
                let p = pred.max(POSITIVE_FLOOR);
                if p > 30.0 {
                    p
                } else {
                    p.exp_m1().ln()
                }
            }
        }
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Linear model `w·x + b`, or `w₂·tanh(W₁x + b₁) + b₂`, followed by a link.
///
/// Parameters are stored flat: `[w, b]` for the linear model and
/// `[W₁ (row-major, hidden × dim), b₁, w₂, b₂]` for the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub arch: Architecture,
    pub dim: usize,
    pub link: Link,
    pub params: Vec<f64>,
}

impl Model {
    pub fn param_count(arch: Architecture, dim: usize) -> usize {
        match arch {
            Architecture::Linear => dim + 1,
            Architecture::Mlp { hidden } => hidden * dim + 2 * hidden + 1,
        }
    }

    /// Linear weights start at zero; network weights are Gaussian with
    /// variance `1/fan_in`. The output bias starts at the link inverse of
    /// `mean_label`.
    pub fn init(arch: Architecture, dim: usize, link: Link, mean_label: f64, rng: &mut RandomSource) -> Self {
        let mut params = vec![0.0; Self::param_count(arch, dim)];
        if let Architecture::Mlp { hidden } = arch {
            let s1 = 1.0 / (dim as f64).sqrt();
            for p in &mut params[..hidden * dim] {
                *p = s1 * rng.normal();
            }
            let s2 = 1.0 / (hidden as f64).sqrt();
            let w2 = hidden * dim + hidden;
            for p in &mut params[w2..w2 + hidden] {
                *p = s2 * rng.normal();
            }
        }
        let last = params.len() - 1;
        params[last] = link.inverse(mean_label);
        Self { arch, dim, link, params }
    }

    pub fn raw(&self, x: &[f64]) -> f64 {
        let d = self.dim;
        let p = &self.params;
        match self.arch {
            Architecture::Linear => dot(&p[..d], x) + p[d],
            Architecture::Mlp { hidden } => {
                let (w1, rest) = p.split_at(hidden * d);
                let (b1, rest) = rest.split_at(hidden);
                let (w2, b2) = rest.split_at(hidden);
                (0..hidden).map(|j| w2[j] * (dot(&w1[j * d..(j + 1) * d], x) + b1[j]).tanh()).sum::<f64>() + b2[0]
            }
        }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.link.apply(self.raw(x))
    }

    /// Writes `∂raw/∂θ` into `out` and returns the raw output.
    pub fn raw_gradient(&self, x: &[f64], out: &mut [f64]) -> f64 {
        let d = self.dim;
        let p = &self.params;
        match self.arch {
            Architecture::Linear => {
                out[..d].copy_from_slice(x);
                out[d] = 1.0;
                dot(&p[..d], x) + p[d]
            }
            Architecture::Mlp { hidden } => {
                let (w1, rest) = p.split_at(hidden * d);
                let (b1, rest) = rest.split_at(hidden);
                let (w2, b2) = rest.split_at(hidden);
                let mut raw = b2[0];
                for j in 0..hidden {
                    let a = (dot(&w1[j * d..(j + 1) * d], x) + b1[j]).tanh();
                    raw += w2[j] * a;
                    let da = w2[j] * (1.0 - a * a);
                    for (o, xi) in out[j * d..(j + 1) * d].iter_mut().zip(x) {
                        *o = da * xi;
                    }
                    out[hidden * d + j] = da;
                    out[hidden * d + hidden + j] = a;
                }
                let last = out.len() - 1;
                out[last] = 1.0;
                raw
            }
        }
    }

    /// Writes `∇_θ f(x)` (through the link) into `out` and returns `f(x)`.
    pub fn gradient(&self, x: &[f64], out: &mut [f64]) -> f64 {
        let raw = self.raw_gradient(x, out);
        let dl = self.link.derivative(raw);
        if dl != 1.0 {
            out.iter_mut().for_each(|g| *g *= dl);
        }
        self.link.apply(raw)
    }

    /// Adds `∇_θ ℓ(f(x), y)` to `acc` and returns the loss.
    pub fn accumulate_loss_gradient(
        &self,
        x: &[f64],
        y: f64,
        loss: LossKind,
        scratch: &mut [f64],
        acc: &mut [f64],
    ) -> Result<f64> {
        let pred = self.gradient(x, scratch);
        let d = loss.dpred(pred, y)?;
        for (a, g) in acc.iter_mut().zip(scratch.iter()) {
            *a += d * g;
        }
        loss.value(pred, y)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{LabelSet, Prior};
use crate::mechanisms::{
    clip, dbrr_matrix, optimal_rr_on_bins, rr_matrix, AdditiveNoise, ClipRange, Family, NoiseKind, Support,
};
use crate::pipeline::{self, BudgetSplit, RandomizerConfig};
use crate::randomizer::RandomizerMatrix;
use crate::rng::RandomSource;

/// Labels per independently seeded sampling chunk.
const CHUNK: usize = 4096;

/// A label mechanism by name, with its parameters, as it appears in
/// experiment configs and on the command line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum MechanismSpec {
    /// No privacy; labels pass through.
    None,
    Laplace {
        #[serde(default)]
        support: Support,
    },
    LaplaceClipped {
        #[serde(default)]
        support: Support,
        /// Defaults to the label range.
        #[serde(default)]
        clip: Option<[f64; 2]>,
    },
    Staircase {
        #[serde(default)]
        support: Support,
    },
    StaircaseClipped {
        #[serde(default)]
        support: Support,
        #[serde(default)]
        clip: Option<[f64; 2]>,
    },
    Rr,
    RrOnBins,
    Dbrr,
    OptUnbiased {
        #[serde(default)]
        grid_size: Option<usize>,
        #[serde(default)]
        continuous: bool,
    },
}

impl MechanismSpec {
    pub const NAMES: [&'static str; 9] = [
        "none",
        "laplace",
        "laplace-clipped",
        "staircase",
        "staircase-clipped",
        "rr",
        "rr-on-bins",
        "dbrr",
        "opt-unbiased",
    ];

    /// Spec with default parameters for a name in [`Self::NAMES`].
    pub fn from_name(name: &str) -> Result<Self> {
        let support = Support::default();
        Ok(match name {
            "none" => Self::None,
            "laplace" => Self::Laplace { support },
            "laplace-clipped" => Self::LaplaceClipped { support, clip: None },
            "staircase" => Self::Staircase { support },
            "staircase-clipped" => Self::StaircaseClipped { support, clip: None },
            "rr" => Self::Rr,
            "rr-on-bins" => Self::RrOnBins,
            "dbrr" => Self::Dbrr,
            "opt-unbiased" => Self::OptUnbiased { grid_size: None, continuous: false },
            other => {
                return Err(Error::Parameter(format!(
                    "unknown mechanism '{other}' (expected one of {})",
                    Self::NAMES.join(", ")
                )))
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Laplace { .. } => "laplace",
            Self::LaplaceClipped { .. } => "laplace-clipped",
            Self::Staircase { .. } => "staircase",
            Self::StaircaseClipped { .. } => "staircase-clipped",
            Self::Rr => "rr",
            Self::RrOnBins => "rr-on-bins",
            Self::Dbrr => "dbrr",
            Self::OptUnbiased { .. } => "opt-unbiased",
        }
    }

    /// Whether the mechanism is fitted to a privately estimated prior, and
    /// so spends part of the budget on it.
    pub fn needs_prior(&self) -> bool {
        matches!(self, Self::RrOnBins | Self::OptUnbiased { .. })
    }

    /// Builds the mechanism at total budget `epsilon`. Prior-fitted
    /// mechanisms take the estimated prior and the split it was made with,
    /// and randomize at `split.epsilon2`.
    pub fn build(
        &self,
        labels: &LabelSet,
        epsilon: f64,
        prior: Option<(&Prior, BudgetSplit)>,
    ) -> Result<LabelMechanism> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::Parameter(format!("epsilon must be positive, got {epsilon}")));
        }
        let additive = |family: Family, support: Support, clip: Option<Option<[f64; 2]>>| -> Result<LabelMechanism> {
            let range = labels.max() - labels.min();
            if range == 0.0 {
                return Ok(LabelMechanism::Identity);
            }
            let noise = AdditiveNoise::new(NoiseKind::new(family, support), epsilon, range)?;
            let clip = match clip {
                None => None,
                Some(None) => Some(ClipRange::new(labels.min(), labels.max())?),
                Some(Some([lo, hi])) => Some(ClipRange::new(lo, hi)?),
            };
            Ok(LabelMechanism::Additive { noise, clip })
        };
        let fitted = || -> Result<(&Prior, BudgetSplit)> {
            let (p, split) =
                prior.ok_or_else(|| Error::Parameter(format!("{} needs a prior estimate", self.name())))?;
            if (split.total() - epsilon).abs() > 1e-12 * epsilon.max(1.0) {
                return Err(Error::Parameter(format!("budget split sums to {}, not {epsilon}", split.total())));
            }
            if p.labels() != labels {
                return Err(Error::Structure("prior is over a different label set".into()));
            }
            Ok((p, split))
        };
        match self {
            Self::None => Ok(LabelMechanism::Identity),
            Self::Laplace { support } => additive(Family::Laplace, *support, None),
            Self::LaplaceClipped { support, clip } => additive(Family::Laplace, *support, Some(*clip)),
            Self::Staircase { support } => additive(Family::Staircase, *support, None),
            Self::StaircaseClipped { support, clip } => additive(Family::Staircase, *support, Some(*clip)),
            Self::Rr => finite_or_identity(labels, |l| rr_matrix(l, epsilon), epsilon),
            Self::Dbrr => finite_or_identity(labels, |l| dbrr_matrix(l, epsilon), epsilon),
            Self::RrOnBins => {
                let (p, split) = fitted()?;
                Ok(LabelMechanism::finite(optimal_rr_on_bins(p, split.epsilon2)?.1))
            }
            Self::OptUnbiased { grid_size, continuous } => {
                let (p, split) = fitted()?;
                let mut config = RandomizerConfig { continuous: *continuous, ..Default::default() };
                if let Some(g) = grid_size {
                    config.grid_size = *g;
                }
                Ok(LabelMechanism::finite(pipeline::build_randomizer(p, split, &config)?))
            }
        }
    }
}

fn finite_or_identity(
    labels: &LabelSet,
    make: impl Fn(&LabelSet) -> Result<RandomizerMatrix>,
    epsilon: f64,
) -> Result<LabelMechanism> {
    if labels.len() == 1 {
        return Ok(LabelMechanism::finite(RandomizerMatrix::pass_through(labels.values()[0], epsilon)?));
    }
    Ok(LabelMechanism::finite(make(labels)?))
}

/// A ready-to-use label mechanism.
#[derive(Debug, Clone)]
pub enum LabelMechanism {
    Identity,
    Additive {
        noise: AdditiveNoise,
        clip: Option<ClipRange>,
    },
    /// `unbiased` records that the matrix passed the unbiasedness check, in
    /// which case its expected output is taken to be the label itself.
    Finite {
        matrix: RandomizerMatrix,
        unbiased: bool,
    },
}

impl LabelMechanism {
    pub fn finite(matrix: RandomizerMatrix) -> Self {
        let scale = matrix.inputs().values().iter().fold(1.0f64, |m, y| m.max(y.abs()));
        let unbiased = matrix.max_bias() <= 1e-9 * scale;
        Self::Finite { matrix, unbiased }
    }

    pub fn is_unbiased(&self) -> bool {
        match self {
            Self::Identity => true,
            Self::Additive { clip, .. } => clip.is_none(),
            Self::Finite { unbiased, .. } => *unbiased,
        }
    }

    pub fn matrix(&self) -> Option<&RandomizerMatrix> {
        match self {
            Self::Finite { matrix, .. } => Some(matrix),
            _ => None,
        }
    }

    /// `E[M(y)]`. Exactly `y` for every unbiased mechanism.
    pub fn expected(&self, y: f64) -> Result<f64> {
        if self.is_unbiased() {
            if let Self::Finite { matrix, .. } = self {
                matrix.inputs().require_index(y)?;
            }
            return Ok(y);
        }
        match self {
            Self::Additive { noise, clip: Some(range) } => Ok(noise.expected_clipped(y, *range)),
            Self::Finite { matrix, .. } => matrix.expected_output(y),
            _ => Ok(y),
        }
    }

    pub fn sample(&self, y: f64, rng: &mut RandomSource) -> Result<f64> {
        match self {
            Self::Identity => Ok(y),
            Self::Additive { noise, clip: range } => {
                if noise.kind().support() == Support::Discrete && y.fract() != 0.0 {
                    return Err(Error::Parameter(format!("discrete noise needs an integer label, got {y}")));
                }
                let v = y + noise.sample_noise(rng);
                Ok(range.map_or(v, |r| clip(v, r)))
            }
            Self::Finite { matrix, .. } => matrix.sample(y, rng),
        }
    }

    /// Privatizes every label. Chunks draw from disjoint streams of `rng`'s
    /// seed, so the result does not depend on the thread count.
    pub fn apply(&self, labels: &[f64], rng: &RandomSource) -> Result<Vec<f64>> {
        if let Self::Finite { matrix, .. } = self {
            return pipeline::randomize_labels(matrix, labels, rng);
        }
        let chunks: Vec<Vec<f64>> = labels
            .par_chunks(CHUNK)
            .enumerate()
            .map(|(c, chunk)| {
                let mut r = rng.fork(c as u64);
                chunk.iter().map(|&y| self.sample(y, &mut r)).collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        Ok(chunks.concat())
    }
}

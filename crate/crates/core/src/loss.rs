use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Training / evaluation loss `ℓ(prediction, label)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// `½ (ŷ − y)²`
    Squared,
    /// `ŷ − y·ln ŷ`, defined for `ŷ > 0`.
    Poisson,
}

impl LossKind {
    pub fn value(self, pred: f64, y: f64) -> Result<f64> {
        match self {
            LossKind::Squared => Ok(0.5 * (pred - y) * (pred - y)),
            LossKind::Poisson => {
                if pred > 0.0 {
                    Ok(pred - y * pred.ln())
                } else {
                    Err(Error::Domain(format!("poisson loss needs a positive prediction, got {pred}")))
                }
            }
        }
    }

    /// `∂ℓ/∂ŷ`.
    pub fn dpred(self, pred: f64, y: f64) -> Result<f64> {
        match self {
            LossKind::Squared => Ok(pred - y),
            LossKind::Poisson => {
                if pred > 0.0 {
                    Ok(1.0 - y / pred)
                } else {
                    Err(Error::Domain(format!("poisson loss needs a positive prediction, got {pred}")))
                }
            }
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "squared" | "sq" => Ok(LossKind::Squared),
            "poisson" | "poi" => Ok(LossKind::Poisson),
            _ => Err(Error::Parameter(format!("unknown loss '{s}'"))),
        }
    }
}

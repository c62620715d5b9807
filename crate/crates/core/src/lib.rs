//! Optimal unbiased label randomizers for regression under label
//! differential privacy.
//!
//! The central object is [`RandomizerMatrix`], a finite ε-DP mechanism from
//! input labels to real output labels. [`optlp`] computes the randomizer that
//! minimizes expected squared error subject to exact unbiasedness, [`mechanisms`]
//! provides the baselines, [`pipeline`] runs the full private workflow
//! (prior estimation, budget split, randomization) and [`analysis`] / [`sim`]
//! hold the exact diagnostics and the training harness.

pub mod analysis;
pub mod error;
pub mod labels;
pub mod loss;
pub mod mechanisms;
pub mod optlp;
pub mod pipeline;
pub mod randomizer;
pub mod rng;
pub mod sim;

pub use error::{Error, Result};
pub use labels::{LabelSet, OutputGrid, Prior};
pub use loss::LossKind;
pub use randomizer::{
    expected_output, sample, validate_randomizer, RandomizerFile, RandomizerMatrix, ValidationReport,
};
pub use rng::RandomSource;

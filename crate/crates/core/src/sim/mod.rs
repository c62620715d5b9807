//! Desk-scale training harness: synthetic regression data with a known
//! Bayes predictor, mini-batch SGD, the gradient bias-variance split and
//! mechanism-comparison experiments.

pub mod data;
pub mod experiment;
pub mod grad;
pub mod mechanism;
pub mod model;
pub mod sgd;

pub use data::{generate_synthetic, BayesPredictor, Dataset, NoiseModel, Population, SyntheticSpec};
pub use experiment::{run_experiment, CellResult, ExperimentConfig, ExperimentReport, SummaryRow};
pub use grad::{grad_decomposition, GradTerms};
pub use mechanism::{LabelMechanism, MechanismSpec};
pub use model::{Architecture, Link, Model};
pub use sgd::{evaluate, train_sgd, SgdConfig, TrainOutcome};

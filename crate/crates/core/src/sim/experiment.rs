use std::io::Write;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::LabelSet;
use crate::pipeline::{estimate_prior_laplace, split_budget, BudgetSplit};
use crate::rng::RandomSource;

use super::data::{generate_rows, Dataset, SyntheticSpec};
use super::mechanism::MechanismSpec;
use super::model::Architecture;
use super::sgd::{evaluate, train_sgd, SgdConfig};

// Streams forked from each seed.
const DATA_STREAM: u64 = 0;
const TEST_STREAM: u64 = 1;
const PRIOR_STREAM: u64 = 2;
const NOISE_STREAM: u64 = 3;
const TRAIN_STREAM: u64 = 4;

fn default_test_count() -> usize {
    20_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub mechanisms: Vec<MechanismSpec>,
    pub epsilons: Vec<f64>,
    pub seeds: Vec<u64>,
    pub data: SyntheticSpec,
    pub sgd: SgdConfig,
    #[serde(default)]
    pub model: Architecture,
    /// Clean held-out rows used for the test loss.
    #[serde(default = "default_test_count")]
    pub test_count: usize,
    /// Budget for prior estimation; `None` uses `split_budget`.
    #[serde(default)]
    pub prior_epsilon: Option<f64>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mechanisms.is_empty() || self.epsilons.is_empty() || self.seeds.is_empty() {
            return Err(Error::Parameter("mechanisms, epsilons and seeds must be nonempty".into()));
        }
        if let Some(e) = self.epsilons.iter().find(|e| !(**e > 0.0 && e.is_finite())) {
            return Err(Error::Parameter(format!("epsilon must be positive, got {e}")));
        }
        if self.data.sample_count == 0 || self.test_count == 0 {
            return Err(Error::Parameter("sample_count and test_count must be positive".into()));
        }
        self.data.validate()?;
        self.sgd.validate()
    }

    /// Display names; repeated mechanism names get their position appended.
    pub fn mechanism_labels(&self) -> Vec<String> {
        self.mechanisms
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let repeated = self.mechanisms.iter().filter(|o| o.name() == m.name()).count() > 1;
                if repeated {
                    format!("{}#{i}", m.name())
                } else {
                    m.name().to_string()
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub mechanism: String,
    pub epsilon: f64,
    pub seed: u64,
    /// Mean of `½(ŷ − y)²` over the training labels.
    pub noisy_label_loss: f64,
    /// Mean loss on clean held-out labels.
    pub test_loss: f64,
    pub blowup: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub mechanism: String,
    pub epsilon: f64,
    pub runs: usize,
    pub failures: usize,
    pub blowups: usize,
    pub noisy_label_loss_mean: f64,
    pub noisy_label_loss_std: f64,
    pub test_loss_mean: f64,
    pub test_loss_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub summary: Vec<SummaryRow>,
    pub cells: Vec<CellResult>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    (m, (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)).sqrt())
}

impl ExperimentReport {
    pub fn row(&self, mechanism: &str, epsilon: f64) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| r.mechanism == mechanism && r.epsilon == epsilon)
    }

    /// `mechanism,epsilon,seed,noisy_label_loss,test_loss,blowup_flag`;
    /// failed cells carry `NaN` losses.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["mechanism", "epsilon", "seed", "noisy_label_loss", "test_loss", "blowup_flag"])?;
        for c in &self.cells {
            w.write_record([
                c.mechanism.clone(),
                format!("{:?}", c.epsilon),
                c.seed.to_string(),
                format!("{:?}", c.noisy_label_loss),
                format!("{:?}", c.test_loss),
                c.blowup.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Aggregated summary plus the failed cells, as pretty JSON.
    pub fn summary_json(&self) -> Result<String> {
        let failures: Vec<&CellResult> = self.cells.iter().filter(|c| c.error.is_some()).collect();
        let v = serde_json::json!({ "summary": self.summary, "failures": failures });
        Ok(serde_json::to_string_pretty(&v)?)
    }
}

struct SeedData {
    train: Dataset,
    test: Dataset,
}

fn run_cell(
    config: &ExperimentConfig,
    labels: &LabelSet,
    mech: &MechanismSpec,
    epsilon: f64,
    seed: u64,
    data: &SeedData,
) -> Result<(f64, f64, bool)> {
    let root = RandomSource::new(seed);
    let y = &data.train.y;
    let prior = if mech.needs_prior() {
        let split = match config.prior_epsilon {
            Some(e1) => BudgetSplit::with_prior_epsilon(epsilon, e1)?,
            None => split_budget(epsilon, labels.len(), y.len())?,
        };
        let p = estimate_prior_laplace(y, labels, split.epsilon1, &mut root.fork(PRIOR_STREAM))?;
        Some((p, split))
    } else {
        None
    };
    let mechanism = mech.build(labels, epsilon, prior.as_ref().map(|(p, s)| (p, *s)))?;
    let noisy = mechanism.apply(y, &root.fork(NOISE_STREAM))?;
    let nll = noisy.iter().zip(y).map(|(a, b)| 0.5 * (a - b) * (a - b)).sum::<f64>() / y.len() as f64;
    let train = data.train.with_labels(noisy)?;
    let out = train_sgd(&train, config.model, &config.sgd, &mut root.fork(TRAIN_STREAM))?;
    let test_loss = evaluate(&out.model, &data.test, config.sgd.loss)?;
    Ok((nll, test_loss, out.blowup))
}

/// Runs every (mechanism, ε, seed) cell in parallel. Training and test data
/// depend only on the seed, so mechanisms are compared on the same rows. A
/// failing cell is recorded and the rest continue.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let labels = config.data.labels()?;
    let names = config.mechanism_labels();

    let datasets: Vec<SeedData> = config
        .seeds
        .par_iter()
        .map(|&seed| {
            let root = RandomSource::new(seed);
            let (train, _) = generate_rows(&config.data, config.data.sample_count, &mut root.fork(DATA_STREAM))?;
            let (test, _) = generate_rows(&config.data, config.test_count, &mut root.fork(TEST_STREAM))?;
            Ok(SeedData { train, test })
        })
        .collect::<Result<_>>()?;

    let jobs: Vec<(usize, usize, usize)> = (0..config.mechanisms.len())
        .flat_map(|m| (0..config.epsilons.len()).flat_map(move |e| (0..config.seeds.len()).map(move |s| (m, e, s))))
        .collect();
    let cells: Vec<CellResult> = jobs
        .par_iter()
        .map(|&(m, e, s)| {
            let (epsilon, seed) = (config.epsilons[e], config.seeds[s]);
            let res = run_cell(config, &labels, &config.mechanisms[m], epsilon, seed, &datasets[s]);
            let mechanism = names[m].clone();
            match res {
                Ok((noisy_label_loss, test_loss, blowup)) => {
                    info!("{mechanism} eps={epsilon} seed={seed}: noisy {noisy_label_loss:.4e}, test {test_loss:.4e}");
                    CellResult { mechanism, epsilon, seed, noisy_label_loss, test_loss, blowup, error: None }
                }
                Err(err) => {
                    warn!("{mechanism} eps={epsilon} seed={seed} failed: {err}");
                    CellResult {
                        mechanism,
                        epsilon,
                        seed,
                        noisy_label_loss: f64::NAN,
                        test_loss: f64::NAN,
                        blowup: false,
                        error: Some(err.to_string()),
                    }
                }
            }
        })
        .collect();

    let mut summary = Vec::new();
    for name in &names {
        for &epsilon in &config.epsilons {
            let group: Vec<&CellResult> =
                cells.iter().filter(|c| &c.mechanism == name && c.epsilon == epsilon).collect();
            let ok: Vec<&&CellResult> = group.iter().filter(|c| c.error.is_none()).collect();
            let (nm, ns) = mean_std(&ok.iter().map(|c| c.noisy_label_loss).collect::<Vec<_>>());
            let (tm, ts) = mean_std(&ok.iter().map(|c| c.test_loss).collect::<Vec<_>>());
            summary.push(SummaryRow {
                mechanism: name.clone(),
                epsilon,
                runs: ok.len(),
                failures: group.len() - ok.len(),
                blowups: ok.iter().filter(|c| c.blowup).count(),
                noisy_label_loss_mean: nm,
                noisy_label_loss_std: ns,
                test_loss_mean: tm,
                test_loss_std: ts,
            });
        }
    }
    Ok(ExperimentReport { summary, cells })
}

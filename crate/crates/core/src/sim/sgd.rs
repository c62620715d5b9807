use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::LossKind;
use crate::rng::RandomSource;

use super::data::Dataset;
use super::model::{Architecture, Link, Model};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default)]
    pub l2: f64,
    pub loss: LossKind,
    /// Epochs without improvement before stopping; 0 disables early stopping.
    #[serde(default)]
    pub early_stop_patience: usize,
    /// Step size in epoch `t` is `learning_rate / (1 + decay·t)`.
    #[serde(default)]
    pub decay: f64,
    /// Report the average of each epoch's iterates instead of the last one.
    #[serde(default)]
    pub average: bool,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            batch_size: 64,
            epochs: 10,
            l2: 0.0,
            loss: LossKind::Squared,
            early_stop_patience: 0,
            decay: 0.0,
            average: false,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Parameter(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Parameter("batch_size and epochs must be at least 1".into()));
        }
        if !(self.l2 >= 0.0 && self.decay >= 0.0) {
            return Err(Error::Parameter("l2 and decay must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    /// Training objective before the first epoch and after each epoch.
    pub trace: Vec<f64>,
    /// Index into `trace` of the returned model.
    pub best_epoch: usize,
    /// Training diverged; the returned model is the best one before that.
    pub blowup: bool,
}

/// Mean loss plus `½·l2·‖θ‖²`.
pub fn objective(model: &Model, data: &Dataset, loss: LossKind, l2: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..data.len() {
        match loss.value(model.predict(data.row(i)), data.y[i]) {
            Ok(v) => total += v,
            Err(_) => return f64::NAN,
        }
    }
    let reg = 0.5 * l2 * model.params.iter().map(|p| p * p).sum::<f64>();
    total / data.len() as f64 + reg
}

/// Mini-batch SGD from [`Model::init`].
///
/// With early stopping on, the model with the lowest training objective seen
/// so far is returned. A non-finite objective or parameter ends training and
/// flags a blowup; the best earlier model is returned in that case too.
pub fn train_sgd(
    data: &Dataset,
    arch: Architecture,
    config: &SgdConfig,
    rng: &mut RandomSource,
) -> Result<TrainOutcome> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training set has no rows".into()));
    }
    let link = Link::for_loss(config.loss);
    let mean = data.y.iter().sum::<f64>() / data.len() as f64;
    let mut model = Model::init(arch, data.dim, link, mean, rng);
    let n_params = model.params.len();

    let mut trace = vec![objective(&model, data, config.loss, config.l2)];
    let mut best = (trace[0], 0, model.clone());
    let mut since_best = 0;
    let mut blowup = !trace[0].is_finite();
    let mut last = model.clone();

    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut grad = vec![0.0; n_params];
    let mut scratch = vec![0.0; n_params];
    let mut avg = vec![0.0; n_params];

    'epochs: for epoch in 0..config.epochs {
        if blowup {
            break;
        }
        let lr = config.learning_rate / (1.0 + config.decay * epoch as f64);
        rng.shuffle(&mut order);
        avg.iter_mut().for_each(|a| *a = 0.0);
        let mut steps = 0.0;
        for batch in order.chunks(config.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for &i in batch {
                if model.accumulate_loss_gradient(data.row(i), data.y[i], config.loss, &mut scratch, &mut grad).is_err()
                {
                    blowup = true;
                    break 'epochs;
                }
            }
            let inv = 1.0 / batch.len() as f64;
            for (p, g) in model.params.iter_mut().zip(&grad) {
                *p -= lr * (g * inv + config.l2 * *p);
            }
            if model.params.iter().any(|p| !p.is_finite()) {
                blowup = true;
                break 'epochs;
            }
            if config.average {
                steps += 1.0;
                for (a, p) in avg.iter_mut().zip(&model.params) {
                    *a += (p - *a) / steps;
                }
            }
        }
        let snapshot = if config.average { Model { params: avg.clone(), ..model.clone() } } else { model.clone() };
        let obj = objective(&snapshot, data, config.loss, config.l2);
        debug!("epoch {}: objective {obj:.6e}", epoch + 1);
        trace.push(obj);
        if !obj.is_finite() {
            blowup = true;
            break;
        }
        last = snapshot;
        if obj < best.0 {
            best = (obj, trace.len() - 1, last.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if config.early_stop_patience > 0 && since_best >= config.early_stop_patience {
                debug!("early stop after epoch {}", epoch + 1);
                break;
            }
        }
    }
    if blowup {
        warn!("training diverged; returning the checkpoint from epoch {}", best.1);
    }
    let (model, best_epoch) =
        if blowup || config.early_stop_patience > 0 { (best.2, best.1) } else { (last, trace.len() - 1) };
    Ok(TrainOutcome { model, trace, best_epoch, blowup })
}

/// Mean test loss of `model` on `data`.
pub fn evaluate(model: &Model, data: &Dataset, loss: LossKind) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..data.len() {
        total += loss.value(model.predict(data.row(i)), data.y[i])?;
    }
    Ok(total / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::data::{generate_synthetic, NoiseModel, SyntheticSpec};

    fn noiseless(n: usize) -> SyntheticSpec {
        SyntheticSpec {
            noise: NoiseModel::LinearRounded { noise_halfwidth: 0.0 },
            label_set: (0..1001).map(|i| i as f64 * 0.01).collect(),
            ..SyntheticSpec::linear_ten(n)
        }
    }

    #[test]
    fn noiseless_linear_recovery() {
        // Labels live on a 0.01 grid; rounding is unbiased so E[y|x] stays linear.
        let spec = noiseless(20_000);
        let (data, _) = generate_synthetic(&spec, &mut RandomSource::new(1)).unwrap();
        let cfg = SgdConfig {
            learning_rate: 0.1,
            batch_size: 32,
            epochs: 30,
            decay: 0.2,
            average: true,
            ..Default::default()
        };
        let out = train_sgd(&data, Architecture::Linear, &cfg, &mut RandomSource::new(2)).unwrap();
        assert!(!out.blowup);
        let err: f64 =
            spec.true_weights.iter().zip(&out.model.params).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(err < 1e-2, "{err}: {:?}", out.model.params);
        assert!((out.model.params[5] - spec.intercept).abs() < 1e-2);
    }

    #[test]
    fn early_stopping_returns_trace_minimum() {
        let spec = SyntheticSpec::linear_ten(2000);
        let (data, _) = generate_synthetic(&spec, &mut RandomSource::new(4)).unwrap();
        for lr in [0.01, 0.3, 0.6] {
            let cfg = SgdConfig {
                learning_rate: lr,
                epochs: 12,
                early_stop_patience: 3,
                batch_size: 8,
                ..Default::default()
            };
            let out = train_sgd(&data, Architecture::Linear, &cfg, &mut RandomSource::new(5)).unwrap();
            let min = out.trace.iter().cloned().filter(|v| v.is_finite()).fold(f64::INFINITY, f64::min);
            assert_eq!(out.trace[out.best_epoch], min);
            assert!((objective(&out.model, &data, cfg.loss, cfg.l2) - min).abs() <= 1e-12 * min.max(1.0));
        }
    }

    #[test]
    fn divergence_is_flagged() {
        let spec = SyntheticSpec::linear_ten(2000);
        let (data, _) = generate_synthetic(&spec, &mut RandomSource::new(4)).unwrap();
        let cfg = SgdConfig { learning_rate: 50.0, epochs: 5, ..Default::default() };
        let out = train_sgd(&data, Architecture::Linear, &cfg, &mut RandomSource::new(5)).unwrap();
        assert!(out.blowup);
        assert_eq!(out.best_epoch, 0);
        assert!(out.model.params.iter().all(|p| p.is_finite()));
    }

    #[test]
    fn poisson_training_stays_positive() {
        let spec = SyntheticSpec::linear_ten(5000);
        let (data, _) = generate_synthetic(&spec, &mut RandomSource::new(6)).unwrap();
        let cfg = SgdConfig { loss: LossKind::Poisson, learning_rate: 0.02, epochs: 5, ..Default::default() };
        let out = train_sgd(&data, Architecture::Mlp { hidden: 8 }, &cfg, &mut RandomSource::new(7)).unwrap();
        assert!(!out.blowup);
        assert!(out.trace.last().unwrap() < &out.trace[0]);
        assert!(evaluate(&out.model, &data, LossKind::Poisson).unwrap().is_finite());
    }

    #[test]
    fn bad_config() {
        let data = Dataset::new(1, vec![0.0], vec![0.0]).unwrap();
        let cfg = SgdConfig { batch_size: 0, ..Default::default() };
        assert!(train_sgd(&data, Architecture::Linear, &cfg, &mut RandomSource::new(0)).is_err());
    }
}

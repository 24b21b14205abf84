use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::*;
use crate::ensemble::derive_seed;
use crate::error::{Error, Result};
use crate::preprocess::LabeledSegment;

/// Segments as one flat `n x window` matrix with class indices.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub window: usize,
    pub lead: usize,
    pub x: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn from_segments<'a>(
        segments: impl IntoIterator<Item = &'a LabeledSegment>,
        window: usize,
        lead: usize,
    ) -> Result<Self> {
        let mut x = Vec::new();
        let mut labels = Vec::new();
        for s in segments {
            if s.values.len() != window {
                return Err(Error::ShapeMismatch {
                    what: "segment length",
                    expected: window,
                    got: s.values.len(),
                });
            }
            x.extend_from_slice(&s.values);
            labels.push(s.label.index());
        }
        Ok(Self {
            window,
            lead,
            x,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.window..(i + 1) * self.window]
    }

    /// Split off the rows listed in `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> Self {
        let mut x = Vec::with_capacity(idx.len() * self.window);
        for &i in idx {
            x.extend_from_slice(self.row(i));
        }
        Self {
            window: self.window,
            lead: self.lead,
            x,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Accuracy of `model` under the strict one-half rule.
    pub fn accuracy(&self, model: &ModelParameters) -> Result<f64> {
        let p = predict_tip(model, &self.x)?;
        let hits = p
            .iter()
            .zip(&self.labels)
            .filter(|(p, y)| is_correct(**p, **y == TIP))
            .count();
        Ok(hits as f64 / self.len().max(1) as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Share of training pairs held out for early stopping.
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            batch_size: 128,
            max_epochs: 50,
            patience: 5,
            seed: 0,
            validation_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::InvalidConfig(format!(
                "validation_fraction must lie in [0, 1), got {}",
                self.validation_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub validation_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_validation_accuracy: f64,
}

/// Mini-batch SGD with per-epoch reshuffling and early stopping; returns
/// the parameters of the epoch with the best validation accuracy.
pub fn train_model(
    train: &Dataset,
    validation: &Dataset,
    config: &TrainConfig,
) -> Result<(ModelParameters, TrainLog)> {
    config.validate()?;
    if train.is_empty() || validation.is_empty() {
        return Err(Error::EmptySample);
    }
    if validation.window != train.window {
        return Err(Error::ShapeMismatch {
            what: "validation window",
            expected: train.window,
            got: validation.window,
        });
    }
    let n_tip = train.labels.iter().filter(|&&y| y == TIP).count();
    if n_tip == 0 || n_tip == train.len() {
        return Err(Error::SingleClass);
    }

    let mut model = ModelParameters::init(train.window, train.lead, derive_seed(config.seed, "init"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "shuffle"));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = TrainLog {
        best_validation_accuracy: f64::NEG_INFINITY,
        ..Default::default()
    };
    let mut best = model.clone();
    let mut stale = 0;

    for epoch in 0..config.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for batch in order.chunks(config.batch_size) {
            let (loss, grads, hits) = loss_and_gradients_indexed(&model, &train.x, &train.labels, batch)?;
            loss_sum += loss * batch.len() as f64;
            correct += hits;
            sgd_step(&mut model, &grads, config.learning_rate);
        }
        let validation_accuracy = validation.accuracy(&model)?;
        log.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_accuracy: correct as f64 / train.len() as f64,
            validation_accuracy,
        });
        if validation_accuracy > log.best_validation_accuracy {
            log.best_validation_accuracy = validation_accuracy;
            log.best_epoch = epoch;
            best = model.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    Ok((best, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_set(n: usize, window: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Dataset {
            window,
            lead: 0,
            x: (0..n * window).map(|_| rng.random_range(-1.0..1.0)).collect(),
            labels: (0..n).map(|i| i % 2).collect(),
        }
    }

    /// Class 1 carries a bump early in the window, class 0 late.
    fn bump_set(n: usize, window: usize) -> Dataset {
        let mut x = Vec::with_capacity(n * window);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let y = i % 2;
            let centre = if y == 1 { window / 4 } else { 3 * window / 4 } as f64;
            let width = 2.0 + (i % 5) as f64 * 0.5;
            for k in 0..window {
                let d = (k as f64 - centre) / width;
                x.push((-0.5 * d * d).exp());
            }
            labels.push(y);
        }
        Dataset { window, lead: 0, x, labels }
    }

    #[test]
    fn memorises_a_small_set() {
        let data = random_set(32, 40, 1);
        let cfg = TrainConfig {
            batch_size: 4,
            max_epochs: 1500,
            patience: 1500,
            seed: 2,
            ..Default::default()
        };
        let (model, log) = train_model(&data, &data, &cfg).unwrap();
        assert_eq!(data.accuracy(&model).unwrap(), 1.0, "{:?}", log.epochs.last());
    }

    #[test]
    fn training_is_deterministic() {
        let data = random_set(40, 30, 3);
        let cfg = TrainConfig {
            batch_size: 16,
            max_epochs: 3,
            seed: 9,
            ..Default::default()
        };
        let (a, la) = train_model(&data, &data, &cfg).unwrap();
        let (b, lb) = train_model(&data, &data, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
    }

    #[test]
    fn single_class_is_rejected() {
        let mut data = random_set(10, 30, 3);
        data.labels.fill(1);
        assert!(matches!(
            train_model(&data, &data, &TrainConfig::default()),
            Err(Error::SingleClass)
        ));
    }

    #[test]
    fn full_batch_loss_does_not_increase() {
        let data = bump_set(40, 40);
        let cfg = TrainConfig {
            batch_size: 40,
            max_epochs: 30,
            patience: 30,
            ..Default::default()
        };
        let (_, log) = train_model(&data, &data, &cfg).unwrap();
        for pair in log.epochs.windows(2) {
            assert!(pair[1].train_loss <= pair[0].train_loss + 1e-12, "{pair:?}");
        }
    }
}

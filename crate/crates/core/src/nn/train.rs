use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Gradients, MlpModel};
use crate::{rng_from_seed, Error, Result};

/// One weighted training example, borrowing its feature vector.
#[derive(Clone, Copy, Debug)]
pub struct Sample<'a> {
    pub features: &'a [f64],
    pub label: usize,
    pub weight: f64,
}

impl<'a> Sample<'a> {
    pub fn new(features: &'a [f64], label: usize) -> Self {
        Sample {
            features,
            label,
            weight: 1.0,
        }
    }

    pub fn weighted(features: &'a [f64], label: usize, weight: f64) -> Self {
        Sample {
            features,
            label,
            weight,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// `None` means full-batch descent.
    pub batch_size: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            learning_rate: 0.1,
            batch_size: None,
            seed: 0,
        }
    }
}

fn check_samples(samples: &[Sample<'_>]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::domain("empty training set"));
    }
    if let Some(s) = samples.iter().find(|s| !(s.weight >= 0.0) || !s.weight.is_finite()) {
        return Err(Error::domain(format!(
            "sample weights must be finite and nonnegative, got {}",
            s.weight
        )));
    }
    Ok(())
}

/// Gradient of the batch loss `(1/n) Σ w_i · L_i`.
pub fn batch_gradient(model: &MlpModel, samples: &[Sample<'_>]) -> Result<Gradients> {
    check_samples(samples)?;
    let mut grads = Gradients::zeros_like(model);
    let n = samples.len() as f64;
    for s in samples {
        model.accumulate_gradient(s.features, s.label, s.weight / n, &mut grads)?;
    }
    Ok(grads)
}

/// `(1/n) Σ w_i · L_i` over the samples.
pub fn weighted_loss(model: &MlpModel, samples: &[Sample<'_>]) -> Result<f64> {
    check_samples(samples)?;
    let mut total = 0.0;
    for s in samples {
        let loss = model.forward(s.features, Some(s.label))?.loss.unwrap_or(0.0);
        total += s.weight * loss;
    }
    Ok(total / samples.len() as f64)
}

/// Gradient descent on the weighted loss. Full batch keeps the input order;
/// mini-batches reshuffle every epoch from `config.seed`.
pub fn train(model: &MlpModel, samples: &[Sample<'_>], config: &TrainConfig) -> Result<MlpModel> {
    check_samples(samples)?;
    if !(config.learning_rate > 0.0) {
        return Err(Error::domain("learning rate must be positive"));
    }
    let n = samples.len();
    let batch = match config.batch_size {
        Some(0) => return Err(Error::domain("batch size must be positive")),
        Some(b) => b.min(n),
        None => n,
    };
    let mut model = model.clone();
    let mut rng = rng_from_seed(config.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut grads = Gradients::zeros_like(&model);
    for _ in 0..config.epochs {
        if batch < n {
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(batch) {
            grads.layers_mut().iter_mut().for_each(|g| g.scale(0.0));
            let m = chunk.len() as f64;
            for &i in chunk {
                let s = &samples[i];
                model.accumulate_gradient(s.features, s.label, s.weight / m, &mut grads)?;
            }
            model.apply_step(&grads, config.learning_rate)?;
        }
    }
    Ok(model)
}

/// Fraction of records whose predicted class equals the label.
pub fn test_accuracy<'a, I>(model: &MlpModel, records: I) -> Result<f64>
where
    I: IntoIterator<Item = (&'a [f64], usize)>,
{
    let mut total = 0usize;
    let mut correct = 0usize;
    for (x, y) in records {
        total += 1;
        if model.predict(x)? == y {
            correct += 1;
        }
    }
    if total == 0 {
        return Err(Error::domain("accuracy of an empty dataset"));
    }
    Ok(correct as f64 / total as f64)
}

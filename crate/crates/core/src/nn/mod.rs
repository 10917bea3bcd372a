//! Dense feed-forward networks with explicit forward traces and analytic
//! backpropagation of the softmax cross-entropy loss.
//!
//! Every layer is stored as one `(in + 1) x out` matrix whose last row is the
//! bias, so [`MlpSpec::param_count`] is `Σ (in_i + 1) · out_i`.

mod dense;
mod matrix;
mod train;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

pub use dense::DenseStack;
pub use matrix::Matrix;
pub use train::{batch_gradient, test_accuracy, train, weighted_loss, Sample, TrainConfig};

pub(crate) use dense::{affine as dense_affine, backward_values, forward_values, init_layer};

use crate::{Error, Result, Rng};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the activation output `y`.
    #[inline]
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Layer widths of a classifier: input dimension, hidden widths, number of
/// classes. The output layer is always a softmax.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MlpSpec {
    layer_widths: Vec<usize>,
    hidden_activation: Activation,
}

impl MlpSpec {
    pub fn new(layer_widths: Vec<usize>, hidden_activation: Activation) -> Result<Self> {
        if layer_widths.len() < 2 {
            return Err(Error::domain(
                "an MLP needs at least an input and an output layer",
            ));
        }
        if layer_widths.iter().any(|&w| w == 0) {
            return Err(Error::domain(format!(
                "layer widths must be positive, got {layer_widths:?}"
            )));
        }
        Ok(MlpSpec {
            layer_widths,
            hidden_activation,
        })
    }

    /// Convenience constructor: `input -> hidden... -> classes` with tanh.
    pub fn classifier(input: usize, hidden: &[usize], classes: usize) -> Result<Self> {
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(input);
        widths.extend_from_slice(hidden);
        widths.push(classes);
        MlpSpec::new(widths, Activation::Tanh)
    }

    pub fn layer_widths(&self) -> &[usize] {
        &self.layer_widths
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden_activation
    }

    pub fn input_width(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn num_classes(&self) -> usize {
        self.layer_widths[self.layer_widths.len() - 1]
    }

    /// Number of weight layers.
    pub fn num_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }

    pub fn param_count(&self) -> u64 {
        self.layer_widths
            .windows(2)
            .map(|w| (w[0] as u64 + 1) * w[1] as u64)
            .sum()
    }

    fn layer_shapes(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.layer_widths.windows(2).map(|w| (w[0] + 1, w[1]))
    }
}

/// Binary indicator vector of `label` among `num_classes` classes.
pub fn one_hot(label: usize, num_classes: usize) -> Result<Vec<f64>> {
    if label >= num_classes {
        return Err(Error::domain(format!(
            "label {label} out of range for {num_classes} classes"
        )));
    }
    let mut v = vec![0.0; num_classes];
    v[label] = 1.0;
    Ok(v)
}

/// Result of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    /// Hidden-layer outputs `h_1 .. h_{n-1}`.
    pub activations: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
    /// Softmax probabilities.
    pub output: Vec<f64>,
    /// Cross-entropy `-ln output[label]`, present when a label was given.
    pub loss: Option<f64>,
}

/// Per-layer loss gradients, shaped like [`MlpModel::weights`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gradients {
    layers: Vec<Matrix>,
}

impl Gradients {
    pub fn zeros_like(model: &MlpModel) -> Self {
        Gradients {
            layers: model
                .weights
                .iter()
                .map(|w| Matrix::zeros(w.rows(), w.cols()))
                .collect(),
        }
    }

    pub fn from_layers(layers: Vec<Matrix>) -> Self {
        Gradients { layers }
    }

    pub fn layers(&self) -> &[Matrix] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Matrix] {
        &mut self.layers
    }

    pub fn last_layer(&self) -> &Matrix {
        &self.layers[self.layers.len() - 1]
    }

    pub fn max_abs(&self) -> f64 {
        self.layers.iter().fold(0.0, |m, l| m.max(l.max_abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(Matrix::is_finite)
    }
}

/// Softmax classifier: the target model, and the combiner of every attack
/// network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    spec: MlpSpec,
    weights: Vec<Matrix>,
}

impl MlpModel {
    pub fn zeros(spec: MlpSpec) -> Self {
        let weights = spec
            .layer_shapes()
            .map(|(r, c)| Matrix::zeros(r, c))
            .collect();
        MlpModel { spec, weights }
    }

    /// Uniform `±1/sqrt(fan_in)` initialization from a seeded generator.
    pub fn init(spec: MlpSpec, seed: u64) -> Self {
        let mut rng = Rng::seed_from_u64(seed);
        Self::init_with(spec, &mut rng)
    }

    pub fn init_with(spec: MlpSpec, rng: &mut Rng) -> Self {
        let weights = spec
            .layer_widths
            .windows(2)
            .map(|w| init_layer(w[0], w[1], rng))
            .collect();
        MlpModel { spec, weights }
    }

    pub fn from_weights(spec: MlpSpec, weights: Vec<Matrix>) -> Result<Self> {
        let shapes: Vec<_> = spec.layer_shapes().collect();
        let actual: Vec<_> = weights.iter().map(Matrix::shape).collect();
        if shapes != actual {
            return Err(Error::domain(format!(
                "weight shapes {actual:?} do not match spec {shapes:?}"
            )));
        }
        if !weights.iter().all(Matrix::is_finite) {
            return Err(Error::Numeric("non-finite weight".into()));
        }
        Ok(MlpModel { spec, weights })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [Matrix] {
        &mut self.weights
    }

    pub fn param_count(&self) -> u64 {
        self.spec.param_count()
    }

    /// Largest absolute elementwise difference between two same-shaped models.
    pub fn max_abs_diff(&self, other: &MlpModel) -> f64 {
        self.weights
            .iter()
            .zip(&other.weights)
            .flat_map(|(a, b)| a.as_slice().iter().zip(b.as_slice()))
            .fold(0.0, |m, (x, y)| m.max((x - y).abs()))
    }

    fn check_input(&self, record: &[f64], label: Option<usize>) -> Result<()> {
        if record.len() != self.spec.input_width() {
            return Err(Error::domain(format!(
                "record has {} features, model expects {}",
                record.len(),
                self.spec.input_width()
            )));
        }
        if let Some(y) = label {
            if y >= self.spec.num_classes() {
                return Err(Error::domain(format!(
                    "label {y} out of range for {} classes",
                    self.spec.num_classes()
                )));
            }
        }
        Ok(())
    }

    fn values(&self, record: &[f64]) -> Vec<Vec<f64>> {
        forward_values(&self.weights, self.spec.hidden_activation, record, false)
    }

    pub fn forward(&self, record: &[f64], label: Option<usize>) -> Result<ForwardTrace> {
        self.check_input(record, label)?;
        let mut values = self.values(record);
        let logits = values.pop().unwrap_or_default();
        values.remove(0);
        trace_from_logits(values, logits, label)
    }

    /// Analytic gradient of the cross-entropy loss for one labelled record.
    pub fn backward(&self, record: &[f64], label: usize) -> Result<Gradients> {
        self.backward_with_trace(record, label).map(|(_, g)| g)
    }

    /// Forward trace and gradients from a single pass.
    pub fn backward_with_trace(
        &self,
        record: &[f64],
        label: usize,
    ) -> Result<(ForwardTrace, Gradients)> {
        let mut grads = Gradients::zeros_like(self);
        let trace = self.accumulate_gradient(record, label, 1.0, &mut grads)?;
        Ok((trace, grads))
    }

    /// Adds `scale * dL/dW` for one record into `grads`.
    pub(crate) fn accumulate_gradient(
        &self,
        record: &[f64],
        label: usize,
        scale: f64,
        grads: &mut Gradients,
    ) -> Result<ForwardTrace> {
        self.check_input(record, Some(label))?;
        let values = self.values(record);
        let logits = values[values.len() - 1].clone();
        let trace = trace_from_logits(values[1..values.len() - 1].to_vec(), logits, Some(label))?;
        let mut delta = trace.output.clone();
        delta[label] -= 1.0;
        backward_values(
            &self.weights,
            self.spec.hidden_activation,
            &values,
            delta,
            false,
            &mut grads.layers,
            scale,
            false,
        );
        Ok(trace)
    }

    /// `W_i - lr * dL/dW_i` for every layer.
    pub fn gd_step(&self, grads: &Gradients, learning_rate: f64) -> Result<MlpModel> {
        let mut next = self.clone();
        next.apply_step(grads, learning_rate)?;
        Ok(next)
    }

    pub(crate) fn apply_step(&mut self, grads: &Gradients, learning_rate: f64) -> Result<()> {
        if !(learning_rate > 0.0) {
            return Err(Error::domain(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        let same = grads.layers.len() == self.weights.len()
            && grads
                .layers
                .iter()
                .zip(&self.weights)
                .all(|(g, w)| g.shape() == w.shape());
        if !same {
            return Err(Error::domain("gradient shapes do not match the model"));
        }
        for (w, g) in self.weights.iter_mut().zip(&grads.layers) {
            w.add_scaled(g, -learning_rate);
        }
        if !self.weights.iter().all(Matrix::is_finite) {
            return Err(Error::Numeric("gradient step produced a non-finite weight".into()));
        }
        Ok(())
    }

    /// Argmax class; ties go to the lowest index.
    pub fn predict(&self, record: &[f64]) -> Result<usize> {
        self.check_input(record, None)?;
        let values = self.values(record);
        Ok(argmax(&values[values.len() - 1]))
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Softmax and cross-entropy computed through log-sum-exp.
pub(crate) fn trace_from_logits(
    activations: Vec<Vec<f64>>,
    logits: Vec<f64>,
    label: Option<usize>,
) -> Result<ForwardTrace> {
    if !logits.iter().all(|z| z.is_finite()) {
        return Err(Error::Numeric("non-finite logit".into()));
    }
    let lse = log_sum_exp(&logits);
    let output = logits.iter().map(|z| (z - lse).exp()).collect();
    let loss = label.map(|y| lse - logits[y]);
    Ok(ForwardTrace {
        activations,
        logits,
        output,
        loss,
    })
}

pub(crate) fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests;

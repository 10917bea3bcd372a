//! Layer-stack primitives shared by [`MlpModel`](super::MlpModel) and the
//! attack encoders. A layer matrix has shape `(in + 1) x out`; the last row
//! holds the bias.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{Activation, Matrix};
use crate::{Error, Result, Rng};

/// `x · W[..in] + W[in]`
pub(crate) fn affine(w: &Matrix, x: &[f64]) -> Vec<f64> {
    let inputs = w.rows() - 1;
    debug_assert_eq!(x.len(), inputs);
    let mut z = w.row(inputs).to_vec();
    for (r, &xr) in x.iter().enumerate() {
        if xr == 0.0 {
            continue;
        }
        for (zj, wj) in z.iter_mut().zip(w.row(r)) {
            *zj += xr * wj;
        }
    }
    z
}

/// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, bias row included.
pub(crate) fn init_layer(inputs: usize, outputs: usize, rng: &mut Rng) -> Matrix {
    let bound = 1.0 / (inputs.max(1) as f64).sqrt();
    let mut m = Matrix::zeros(inputs + 1, outputs);
    for v in m.as_mut_slice() {
        *v = rng.gen_range(-bound..=bound);
    }
    m
}

/// Values flowing through a stack: `values[0]` is the input, `values[i + 1]`
/// the output of layer `i` (post-activation, or raw logits for an
/// unactivated final layer).
pub(crate) fn forward_values(
    weights: &[Matrix],
    act: Activation,
    input: &[f64],
    activate_last: bool,
) -> Vec<Vec<f64>> {
    let mut values = Vec::with_capacity(weights.len() + 1);
    values.push(input.to_vec());
    for (i, w) in weights.iter().enumerate() {
        let mut z = affine(w, &values[i]);
        if activate_last || i + 1 < weights.len() {
            z.iter_mut().for_each(|v| *v = act.apply(*v));
        }
        values.push(z);
    }
    values
}

/// Backpropagates `delta` (gradient w.r.t. the stack output) through the
/// stack, adding `scale * dL/dW_i` into `grads`. Returns the gradient with
/// respect to the stack input when `want_input_grad` is set.
pub(crate) fn backward_values(
    weights: &[Matrix],
    act: Activation,
    values: &[Vec<f64>],
    mut delta: Vec<f64>,
    activate_last: bool,
    grads: &mut [Matrix],
    scale: f64,
    want_input_grad: bool,
) -> Option<Vec<f64>> {
    let n = weights.len();
    for i in (0..n).rev() {
        if activate_last || i + 1 < n {
            for (d, &y) in delta.iter_mut().zip(&values[i + 1]) {
                *d *= act.derivative_from_output(y);
            }
        }
        let input = &values[i];
        let g = &mut grads[i];
        for (r, &xr) in input.iter().enumerate() {
            if xr == 0.0 {
                continue;
            }
            let s = scale * xr;
            for (gj, dj) in g.row_mut(r).iter_mut().zip(&delta) {
                *gj += s * dj;
            }
        }
        for (gj, dj) in g.row_mut(input.len()).iter_mut().zip(&delta) {
            *gj += scale * dj;
        }
        if i == 0 && !want_input_grad {
            return None;
        }
        let w = &weights[i];
        delta = (0..input.len())
            .map(|r| w.row(r).iter().zip(&delta).map(|(a, b)| a * b).sum())
            .collect();
    }
    Some(delta)
}

/// Stack of dense layers with the activation applied after every layer;
/// maps an input block to a learned representation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseStack {
    weights: Vec<Matrix>,
    activation: Activation,
}

impl DenseStack {
    /// `widths` = input width followed by each layer's output width.
    pub fn new(widths: &[usize], activation: Activation, rng: &mut Rng) -> Result<Self> {
        if widths.len() < 2 || widths.iter().any(|&w| w == 0) {
            return Err(Error::domain(format!("invalid encoder widths {widths:?}")));
        }
        let weights = widths
            .windows(2)
            .map(|w| init_layer(w[0], w[1], rng))
            .collect();
        Ok(DenseStack {
            weights,
            activation,
        })
    }

    pub fn input_width(&self) -> usize {
        self.weights[0].rows() - 1
    }

    pub fn output_width(&self) -> usize {
        self.weights[self.weights.len() - 1].cols()
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [Matrix] {
        &mut self.weights
    }

    pub fn zero_grads(&self) -> Vec<Matrix> {
        self.weights
            .iter()
            .map(|w| Matrix::zeros(w.rows(), w.cols()))
            .collect()
    }

    pub(crate) fn forward_values(&self, input: &[f64]) -> Vec<Vec<f64>> {
        forward_values(&self.weights, self.activation, input, true)
    }

    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        self.forward_values(input).pop().unwrap_or_default()
    }

    pub(crate) fn backward(
        &self,
        values: &[Vec<f64>],
        delta: Vec<f64>,
        grads: &mut [Matrix],
        scale: f64,
    ) {
        backward_values(
            &self.weights,
            self.activation,
            values,
            delta,
            true,
            grads,
            scale,
            false,
        );
    }
}

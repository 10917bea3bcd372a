use std::ops::Range;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::features::{FlLayout, FL_BLOCKS_PER_SNAPSHOT};
use super::{AttackSample, Membership, MembershipClassifier};
use crate::nn::{
    argmax, backward_values, forward_values, init_layer, log_sum_exp, Activation, DenseStack,
    Matrix, MlpModel, MlpSpec,
};
use crate::{rng_from_seed, Error, Result, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// One encoder per feature component per snapshot, joined by a combiner.
    FlHierarchical,
    /// One network over the whole distance vector.
    CoresetConcatenation,
    /// One encoder per node's distance block, joined by a combiner.
    CoresetHierarchical,
}

impl Architecture {
    pub fn name(self) -> &'static str {
        match self {
            Architecture::FlHierarchical => "fl_hierarchical",
            Architecture::CoresetConcatenation => "concatenation",
            Architecture::CoresetHierarchical => "hierarchical",
        }
    }
}

/// How the last-layer gradient block is encoded.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientEncoder {
    /// Fully connected layer over the flattened gradient matrix.
    #[default]
    Dense,
    /// Shared kernel applied to each output neuron's gradient column.
    Conv1d { filters: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    /// Width of each component encoder.
    pub encoder_width: usize,
    pub combiner_hidden: Vec<usize>,
    pub activation: Activation,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Per-dimension z-scoring with attack-train statistics.
    pub standardize: bool,
    pub gradient_encoder: GradientEncoder,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            encoder_width: 64,
            combiner_hidden: vec![128, 64],
            activation: Activation::Tanh,
            epochs: 40,
            learning_rate: 0.05,
            batch_size: 32,
            standardize: true,
            gradient_encoder: GradientEncoder::Dense,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoder_width == 0 || self.combiner_hidden.iter().any(|&w| w == 0) {
            return Err(Error::domain("attack network widths must be positive"));
        }
        if self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::domain("attack batch size and learning rate must be positive"));
        }
        if let GradientEncoder::Conv1d { filters: 0 } = self.gradient_encoder {
            return Err(Error::domain("convolution needs at least one filter"));
        }
        Ok(())
    }
}

/// Kernel of width one sliding over the output-neuron axis of a gradient
/// matrix: every column (one output neuron) goes through the same dense map.
#[derive(Clone, Debug, PartialEq)]
struct ConvEncoder {
    kernel: Matrix,
    channels: usize,
    positions: usize,
    activation: Activation,
}

impl ConvEncoder {
    fn column(&self, input: &[f64], j: usize) -> Vec<f64> {
        (0..self.channels).map(|r| input[r * self.positions + j]).collect()
    }

    fn forward(&self, input: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.positions * self.kernel.cols());
        for j in 0..self.positions {
            let z = crate::nn::dense_affine(&self.kernel, &self.column(input, j));
            out.extend(z.into_iter().map(|v| self.activation.apply(v)));
        }
        out
    }

    fn backward(&self, input: &[f64], output: &[f64], delta: &[f64], grad: &mut Matrix, scale: f64) {
        let filters = self.kernel.cols();
        for j in 0..self.positions {
            let x = self.column(input, j);
            let d: Vec<f64> = (0..filters)
                .map(|f| delta[j * filters + f] * self.activation.derivative_from_output(output[j * filters + f]))
                .collect();
            for (r, &xr) in x.iter().enumerate() {
                for (g, df) in grad.row_mut(r).iter_mut().zip(&d) {
                    *g += scale * xr * df;
                }
            }
            for (g, df) in grad.row_mut(self.channels).iter_mut().zip(&d) {
                *g += scale * df;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Encoder {
    Identity(usize),
    Dense(DenseStack),
    Conv(ConvEncoder),
}

#[derive(Clone, Copy, Debug)]
enum EncoderPlan {
    Identity,
    Dense { width: usize },
    Conv { channels: usize, positions: usize, filters: usize },
}

impl Encoder {
    fn build(plan: EncoderPlan, input: usize, activation: Activation, rng: &mut Rng) -> Result<Self> {
        if input == 0 {
            return Err(Error::domain("attack feature block is empty"));
        }
        Ok(match plan {
            EncoderPlan::Identity => Encoder::Identity(input),
            EncoderPlan::Dense { width } => Encoder::Dense(DenseStack::new(&[input, width], activation, rng)?),
            EncoderPlan::Conv { channels, positions, filters } => {
                if channels * positions != input {
                    return Err(Error::domain("gradient block does not match its declared shape"));
                }
                Encoder::Conv(ConvEncoder {
                    kernel: init_layer(channels, filters, rng),
                    channels,
                    positions,
                    activation,
                })
            }
        })
    }

    fn input_width(&self) -> usize {
        match self {
            Encoder::Identity(w) => *w,
            Encoder::Dense(d) => d.input_width(),
            Encoder::Conv(c) => c.channels * c.positions,
        }
    }

    fn output_width(&self) -> usize {
        match self {
            Encoder::Identity(w) => *w,
            Encoder::Dense(d) => d.output_width(),
            Encoder::Conv(c) => c.positions * c.kernel.cols(),
        }
    }

    /// Values through the encoder; the last entry is its output.
    fn forward(&self, input: &[f64]) -> Vec<Vec<f64>> {
        match self {
            Encoder::Identity(_) => vec![input.to_vec()],
            Encoder::Dense(d) => d.forward_values(input),
            Encoder::Conv(c) => vec![input.to_vec(), c.forward(input)],
        }
    }

    fn backward(&self, values: &[Vec<f64>], delta: Vec<f64>, grads: &mut [Matrix], scale: f64) {
        match self {
            Encoder::Identity(_) => {}
            Encoder::Dense(d) => d.backward(values, delta, grads, scale),
            Encoder::Conv(c) => c.backward(&values[0], &values[1], &delta, &mut grads[0], scale),
        }
    }

    fn zero_grads(&self) -> Vec<Matrix> {
        match self {
            Encoder::Identity(_) => Vec::new(),
            Encoder::Dense(d) => d.zero_grads(),
            Encoder::Conv(c) => vec![Matrix::zeros(c.kernel.rows(), c.kernel.cols())],
        }
    }

    fn weights_mut(&mut self) -> &mut [Matrix] {
        match self {
            Encoder::Identity(_) => &mut [],
            Encoder::Dense(d) => d.weights_mut(),
            Encoder::Conv(c) => std::slice::from_mut(&mut c.kernel),
        }
    }
}

/// Per-block z-score transform.
#[derive(Clone, Debug, PartialEq)]
struct Standardizer {
    mean: Vec<Vec<f64>>,
    inv_std: Vec<Vec<f64>>,
}

impl Standardizer {
    fn fit(samples: &[Vec<Vec<f64>>]) -> Self {
        let n = samples.len() as f64;
        let blocks = samples[0].len();
        let mut mean = Vec::with_capacity(blocks);
        let mut inv_std = Vec::with_capacity(blocks);
        for b in 0..blocks {
            let width = samples[0][b].len();
            let mut m = vec![0.0; width];
            for s in samples {
                for (acc, v) in m.iter_mut().zip(&s[b]) {
                    *acc += v;
                }
            }
            m.iter_mut().for_each(|v| *v /= n);
            let mut var = vec![0.0; width];
            for s in samples {
                for ((acc, v), mu) in var.iter_mut().zip(&s[b]).zip(&m) {
                    *acc += (v - mu) * (v - mu);
                }
            }
            let inv = var
                .iter()
                .map(|v| {
                    let sd = (v / n).sqrt();
                    if sd > 1e-12 { 1.0 / sd } else { 1.0 }
                })
                .collect();
            mean.push(m);
            inv_std.push(inv);
        }
        Standardizer { mean, inv_std }
    }

    fn apply(&self, blocks: &mut [Vec<f64>]) {
        for ((block, m), s) in blocks.iter_mut().zip(&self.mean).zip(&self.inv_std) {
            for ((v, mu), is) in block.iter_mut().zip(m).zip(s) {
                *v = (*v - mu) * is;
            }
        }
    }
}

/// Trained membership classifier: encoders over feature blocks feeding a
/// two-class softmax combiner (IN, OUT).
#[derive(Clone, Debug, PartialEq)]
pub struct AttackModel {
    architecture: Architecture,
    concat_inputs: bool,
    standardizer: Option<Standardizer>,
    encoders: Vec<Encoder>,
    combiner: MlpModel,
}

struct Pass {
    encoder_values: Vec<Vec<Vec<f64>>>,
    combiner_values: Vec<Vec<f64>>,
}

impl AttackModel {
    pub fn architecture(&self) -> Architecture {
        self.architecture
    }

    pub fn combiner(&self) -> &MlpModel {
        &self.combiner
    }

    pub fn num_encoders(&self) -> usize {
        self.encoders.len()
    }

    fn arrange(&self, blocks: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let mut arranged = if self.concat_inputs {
            vec![blocks.concat()]
        } else {
            blocks.to_vec()
        };
        if arranged.len() != self.encoders.len()
            || arranged.iter().zip(&self.encoders).any(|(b, e)| b.len() != e.input_width())
        {
            return Err(Error::domain("attack sample does not match the model's feature layout"));
        }
        if let Some(s) = &self.standardizer {
            s.apply(&mut arranged);
        }
        Ok(arranged)
    }

    fn pass(&self, blocks: &[Vec<f64>]) -> Pass {
        let encoder_values: Vec<Vec<Vec<f64>>> = self
            .encoders
            .iter()
            .zip(blocks)
            .map(|(e, b)| e.forward(b))
            .collect();
        let joined: Vec<f64> = encoder_values
            .iter()
            .flat_map(|v| v[v.len() - 1].iter().copied())
            .collect();
        let combiner_values = forward_values(
            self.combiner.weights(),
            self.combiner.spec().hidden_activation(),
            &joined,
            false,
        );
        Pass {
            encoder_values,
            combiner_values,
        }
    }

    /// Probability that the record was a training member.
    pub fn in_probability(&self, blocks: &[Vec<f64>]) -> Result<f64> {
        let pass = self.pass(&self.arrange(blocks)?);
        let logits = &pass.combiner_values[pass.combiner_values.len() - 1];
        Ok((logits[0] - log_sum_exp(logits)).exp())
    }

    fn fit(&mut self, train: &[Vec<Vec<f64>>], labels: &[usize], config: &AttackConfig, rng: &mut Rng) -> Result<()> {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut enc_grads: Vec<Vec<Matrix>> = self.encoders.iter().map(Encoder::zero_grads).collect();
        let mut comb_grads: Vec<Matrix> = self
            .combiner
            .weights()
            .iter()
            .map(|w| Matrix::zeros(w.rows(), w.cols()))
            .collect();
        let act = self.combiner.spec().hidden_activation();
        for _ in 0..config.epochs {
            order.shuffle(rng);
            for batch in order.chunks(config.batch_size) {
                enc_grads.iter_mut().flatten().chain(comb_grads.iter_mut()).for_each(|g| g.scale(0.0));
                let scale = 1.0 / batch.len() as f64;
                for &i in batch {
                    let pass = self.pass(&train[i]);
                    let logits = &pass.combiner_values[pass.combiner_values.len() - 1];
                    let lse = log_sum_exp(logits);
                    let mut delta: Vec<f64> = logits.iter().map(|z| (z - lse).exp()).collect();
                    delta[labels[i]] -= 1.0;
                    let d_joined = backward_values(
                        self.combiner.weights(),
                        act,
                        &pass.combiner_values,
                        delta,
                        false,
                        &mut comb_grads,
                        scale,
                        true,
                    )
                    .unwrap_or_default();
                    let mut offset = 0;
                    for ((enc, values), grads) in self.encoders.iter().zip(&pass.encoder_values).zip(enc_grads.iter_mut()) {
                        let w = enc.output_width();
                        enc.backward(values, d_joined[offset..offset + w].to_vec(), grads, scale);
                        offset += w;
                    }
                }
                let lr = config.learning_rate;
                for (w, g) in self.combiner.weights_mut().iter_mut().zip(&comb_grads) {
                    w.add_scaled(g, -lr);
                }
                for (enc, grads) in self.encoders.iter_mut().zip(&enc_grads) {
                    for (w, g) in enc.weights_mut().iter_mut().zip(grads) {
                        w.add_scaled(g, -lr);
                    }
                }
            }
        }
        if !self.combiner.weights().iter().all(Matrix::is_finite) {
            return Err(Error::Numeric("attack training diverged".into()));
        }
        Ok(())
    }
}

impl MembershipClassifier for AttackModel {
    fn classify(&self, sample: &AttackSample) -> Result<Membership> {
        let pass = self.pass(&self.arrange(&sample.blocks)?);
        Ok(Membership::from_class(argmax(
            &pass.combiner_values[pass.combiner_values.len() - 1],
        )))
    }
}

fn check_classes(train: &[AttackSample]) -> Result<()> {
    let ins = train.iter().filter(|s| s.membership == Membership::In).count();
    if ins == 0 || ins == train.len() {
        return Err(Error::domain("attack training set must contain both IN and OUT samples"));
    }
    Ok(())
}

fn build_and_fit(
    architecture: Architecture,
    concat_inputs: bool,
    plans: &[EncoderPlan],
    combiner_hidden: &[usize],
    train: &[AttackSample],
    config: &AttackConfig,
    seed: u64,
) -> Result<AttackModel> {
    config.validate()?;
    check_classes(train)?;
    let mut rng = rng_from_seed(seed);
    let first = if concat_inputs {
        vec![train[0].blocks.concat()]
    } else {
        train[0].blocks.clone()
    };
    if first.len() != plans.len() {
        return Err(Error::domain(format!(
            "expected {} feature blocks, found {}",
            plans.len(),
            first.len()
        )));
    }
    let encoders = plans
        .iter()
        .zip(&first)
        .map(|(&p, b)| Encoder::build(p, b.len(), config.activation, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let joined: usize = encoders.iter().map(Encoder::output_width).sum();
    let mut widths = vec![joined];
    widths.extend_from_slice(combiner_hidden);
    widths.push(2);
    let combiner = MlpModel::init_with(MlpSpec::new(widths, config.activation)?, &mut rng);
    let mut model = AttackModel {
        architecture,
        concat_inputs,
        standardizer: None,
        encoders,
        combiner,
    };
    let mut arranged = Vec::with_capacity(train.len());
    for s in train {
        arranged.push(model.arrange(&s.blocks)?);
    }
    if config.standardize {
        let st = Standardizer::fit(&arranged);
        arranged.iter_mut().for_each(|a| st.apply(a));
        model.standardizer = Some(st);
    }
    let labels: Vec<usize> = train.iter().map(|s| s.membership.class()).collect();
    model.fit(&arranged, &labels, config, &mut rng)?;
    Ok(model)
}

/// White-box attack on federated learning: one encoder per component per
/// snapshot, concatenated into a combiner.
pub fn train_fl_attack(
    train: &[AttackSample],
    layout: &FlLayout,
    config: &AttackConfig,
    seed: u64,
) -> Result<AttackModel> {
    let (rows, cols) = layout.gradient_shape;
    let dense = EncoderPlan::Dense {
        width: config.encoder_width,
    };
    let gradient = match config.gradient_encoder {
        GradientEncoder::Dense => dense,
        GradientEncoder::Conv1d { filters } => EncoderPlan::Conv {
            channels: rows,
            positions: cols,
            filters,
        },
    };
    let plans: Vec<EncoderPlan> = (0..layout.snapshots)
        .flat_map(|_| [gradient, dense, dense, dense, dense])
        .collect();
    debug_assert_eq!(plans.len(), layout.snapshots * FL_BLOCKS_PER_SNAPSHOT);
    build_and_fit(
        Architecture::FlHierarchical,
        false,
        &plans,
        &config.combiner_hidden,
        train,
        config,
        seed,
    )
}

/// Attack on a shared coreset over per-node distance blocks.
///
/// `Concatenation` runs the combiner over the whole vector. `Hierarchical`
/// feeds each node's block into its own `1/N` share of the first hidden
/// layer and the combiner continues from the second hidden layer.
pub fn train_coreset_attack(
    train: &[AttackSample],
    architecture: Architecture,
    boundaries: &[Range<usize>],
    config: &AttackConfig,
    seed: u64,
) -> Result<AttackModel> {
    let Some(sample) = train.first() else {
        return Err(Error::domain("empty attack training set"));
    };
    if boundaries.is_empty()
        || sample.blocks.len() != boundaries.len()
        || sample.blocks.iter().zip(boundaries).any(|(b, r)| b.len() != r.len())
        || boundaries.windows(2).any(|w| w[0].end != w[1].start)
    {
        return Err(Error::domain("node boundaries do not match the distance vector"));
    }
    match architecture {
        Architecture::CoresetConcatenation => build_and_fit(
            architecture,
            true,
            &[EncoderPlan::Identity],
            &config.combiner_hidden,
            train,
            config,
            seed,
        ),
        Architecture::CoresetHierarchical => {
            let first = config.combiner_hidden.first().copied().unwrap_or(config.encoder_width);
            let width = (first / boundaries.len()).max(1);
            let plans = vec![EncoderPlan::Dense { width }; boundaries.len()];
            let rest = config.combiner_hidden.get(1..).unwrap_or(&[]);
            build_and_fit(architecture, false, &plans, rest, train, config, seed)
        }
        Architecture::FlHierarchical => Err(Error::domain(
            "the federated-learning architecture does not apply to coreset features",
        )),
    }
}

use std::ops::Range;

use crate::coreset::GlobalCoreset;
use crate::fedsim::TrainingTranscript;
use crate::nn::{one_hot, Matrix};
use crate::{Error, Result};

/// White-box view of one record at one snapshot epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotFeatures {
    pub epoch: usize,
    /// Loss gradient of the output layer, `(last_hidden + 1) x classes`.
    pub gradient: Matrix,
    /// Output of the last hidden layer.
    pub activation: Vec<f64>,
    pub output: Vec<f64>,
    pub one_hot: Vec<f64>,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlAttackFeatures {
    pub snapshots: Vec<SnapshotFeatures>,
}

/// Block structure of FL attack features: five blocks per snapshot
/// (gradient, activation, output, one-hot, loss).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlLayout {
    pub snapshots: usize,
    pub gradient_shape: (usize, usize),
    pub activation_width: usize,
    pub num_classes: usize,
}

pub(crate) const FL_BLOCKS_PER_SNAPSHOT: usize = 5;

impl FlLayout {
    pub fn block_widths(&self) -> Vec<usize> {
        let (r, c) = self.gradient_shape;
        (0..self.snapshots)
            .flat_map(|_| [r * c, self.activation_width, self.num_classes, self.num_classes, 1])
            .collect()
    }
}

impl FlAttackFeatures {
    pub fn layout(&self) -> Option<FlLayout> {
        let s = self.snapshots.first()?;
        Some(FlLayout {
            snapshots: self.snapshots.len(),
            gradient_shape: s.gradient.shape(),
            activation_width: s.activation.len(),
            num_classes: s.output.len(),
        })
    }

    /// Flattens into attack input blocks, snapshot by snapshot.
    pub fn into_blocks(self) -> Vec<Vec<f64>> {
        self.snapshots
            .into_iter()
            .flat_map(|s| {
                [
                    s.gradient.as_slice().to_vec(),
                    s.activation,
                    s.output,
                    s.one_hot,
                    vec![s.loss],
                ]
            })
            .collect()
    }
}

pub fn extract_fl_features(
    transcript: &TrainingTranscript,
    record: &[f64],
    label: usize,
) -> Result<FlAttackFeatures> {
    if transcript.snapshots.is_empty() {
        return Err(Error::domain("transcript holds no snapshot models"));
    }
    let snapshots = transcript
        .snapshots
        .iter()
        .map(|snap| {
            let (trace, grads) = snap.model.backward_with_trace(record, label)?;
            let activation = trace
                .activations
                .last()
                .cloned()
                .ok_or_else(|| Error::domain("target model has no hidden layer"))?;
            Ok(SnapshotFeatures {
                epoch: snap.epoch,
                gradient: grads.last_layer().clone(),
                activation,
                one_hot: one_hot(label, trace.output.len())?,
                loss: trace.loss.unwrap_or_default(),
                output: trace.output,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FlAttackFeatures { snapshots })
}

/// Distances from a record to every reported center, node by node.
#[derive(Clone, Debug, PartialEq)]
pub struct CoresetAttackFeatures {
    pub distances: Vec<f64>,
    pub boundaries: Vec<Range<usize>>,
}

impl CoresetAttackFeatures {
    /// One block per node.
    pub fn into_blocks(self) -> Vec<Vec<f64>> {
        self.boundaries
            .iter()
            .map(|r| self.distances[r.clone()].to_vec())
            .collect()
    }
}

pub fn extract_coreset_features(
    coreset: &GlobalCoreset,
    record: &[f64],
) -> Result<CoresetAttackFeatures> {
    if coreset.num_centers() == 0 {
        return Err(Error::domain("coreset has no centers to measure distances to"));
    }
    if record.len() != coreset.feature_dim() {
        return Err(Error::domain(format!(
            "record has {} features, coreset centers have {}",
            record.len(),
            coreset.feature_dim()
        )));
    }
    let distances = coreset
        .centers()
        .map(|c| crate::clustering::squared_distance(record, &c.features).sqrt())
        .collect();
    Ok(CoresetAttackFeatures {
        distances,
        boundaries: coreset.center_boundaries().to_vec(),
    })
}

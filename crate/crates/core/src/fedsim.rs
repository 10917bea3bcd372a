//! Federated learning with one global aggregation per epoch: each node takes
//! a single full-batch gradient step from the current global model and the
//! server averages the node models weighted by local data size.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datakit::{Dataset, RecordId};
use crate::nn::{batch_gradient, MlpModel, MlpSpec, Sample};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub num_nodes: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Seeds the initial global model.
    pub seed: u64,
    /// 1-based epochs whose aggregated model is kept for the attacker.
    pub snapshot_epochs: Vec<usize>,
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_nodes == 0 {
            return Err(Error::domain("federation needs at least one node"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::domain("learning rate must be positive"));
        }
        if let Some(e) = self.snapshot_epochs.iter().find(|&&e| e == 0 || e > self.epochs) {
            return Err(Error::domain(format!(
                "snapshot epoch {e} outside 1..={}",
                self.epochs
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub epoch: usize,
    pub model: MlpModel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingTranscript {
    pub final_model: MlpModel,
    pub snapshots: Vec<Snapshot>,
    pub scalars_transmitted: u64,
}

const TRANSCRIPT_FORMAT: &str = "mia-tradeoff/transcript";
const TRANSCRIPT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TranscriptFile {
    format: String,
    version: u32,
    transcript: TrainingTranscript,
}

impl TrainingTranscript {
    pub fn snapshot(&self, epoch: usize) -> Option<&MlpModel> {
        self.snapshots
            .iter()
            .find(|s| s.epoch == epoch)
            .map(|s| &s.model)
    }

    /// Writes the transcript as JSON behind a format/version header.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(
            std::io::BufWriter::new(file),
            &TranscriptFile {
                format: TRANSCRIPT_FORMAT.into(),
                version: TRANSCRIPT_VERSION,
                transcript: self.clone(),
            },
        )?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let parsed: TranscriptFile = serde_json::from_reader(std::io::BufReader::new(file))?;
        if parsed.format != TRANSCRIPT_FORMAT || parsed.version != TRANSCRIPT_VERSION {
            return Err(Error::domain(format!(
                "unsupported transcript {} v{}",
                parsed.format, parsed.version
            )));
        }
        Ok(parsed.transcript)
    }
}

/// Scalars moved by full-participation federated learning: every node
/// downloads and uploads the whole model once per epoch.
pub fn fl_communication_cost(spec: &MlpSpec, epochs: usize, num_nodes: usize) -> u64 {
    spec.param_count() * epochs as u64 * 2 * num_nodes as u64
}

/// `count` epochs spread evenly over `1..=epochs`: `round(i · E / count)`.
pub fn snapshot_epoch_selection(epochs: usize, count: usize) -> Result<Vec<usize>> {
    if count == 0 {
        return Err(Error::domain("snapshot count must be positive"));
    }
    if count > epochs {
        return Err(Error::domain(format!(
            "cannot pick {count} snapshots from {epochs} epochs"
        )));
    }
    let mut out: Vec<usize> = (1..=count)
        .map(|i| (2 * i * epochs + count) / (2 * count))
        .collect();
    out.dedup();
    Ok(out)
}

/// Scalars per transmitted coreset point.
pub fn coreset_record_width(feature_dim: usize, include_weight: bool) -> usize {
    feature_dim + 1 + usize::from(include_weight)
}

/// Scalars moved by sending a coreset of `coreset_size` points.
pub fn coreset_communication_cost(coreset_size: usize, record_width: usize) -> Result<u64> {
    if coreset_size == 0 || record_width == 0 {
        return Err(Error::domain("coreset size and record width must be positive"));
    }
    Ok(coreset_size as u64 * record_width as u64)
}

/// Control traffic of the construction protocol: each node reports one cost
/// per profiled k, the server returns a (centers, samples) pair per node.
pub fn coreset_control_traffic(grid_sizes: &[usize]) -> u64 {
    grid_sizes.iter().map(|&g| g as u64 + 2).sum()
}

/// Trains from a model initialized with `config.seed`.
pub fn federated_train(
    nodes: &[Vec<Sample<'_>>],
    spec: MlpSpec,
    config: &FederationConfig,
) -> Result<TrainingTranscript> {
    let initial = MlpModel::init(spec, config.seed);
    federated_train_from(nodes, initial, config)
}

pub fn federated_train_from(
    nodes: &[Vec<Sample<'_>>],
    initial: MlpModel,
    config: &FederationConfig,
) -> Result<TrainingTranscript> {
    config.validate()?;
    if nodes.len() != config.num_nodes {
        return Err(Error::domain(format!(
            "{} node datasets given for a {}-node federation",
            nodes.len(),
            config.num_nodes
        )));
    }
    if let Some(i) = nodes.iter().position(Vec::is_empty) {
        return Err(Error::domain(format!("node {i} has no training data")));
    }
    let total: usize = nodes.iter().map(Vec::len).sum();
    let shares: Vec<f64> = nodes.iter().map(|n| n.len() as f64 / total as f64).collect();

    let mut global = initial;
    let mut snapshots = Vec::with_capacity(config.snapshot_epochs.len());
    for epoch in 1..=config.epochs {
        let locals = nodes
            .par_iter()
            .map(|samples| {
                let grads = batch_gradient(&global, samples)?;
                global.gd_step(&grads, config.learning_rate)
            })
            .collect::<Result<Vec<MlpModel>>>()?;
        global = aggregate(&locals, &shares);
        if config.snapshot_epochs.contains(&epoch) {
            snapshots.push(Snapshot {
                epoch,
                model: global.clone(),
            });
        }
    }
    Ok(TrainingTranscript {
        scalars_transmitted: fl_communication_cost(global.spec(), config.epochs, config.num_nodes),
        final_model: global,
        snapshots,
    })
}

/// `Σ_i share_i · model_i`, reduced in node order.
fn aggregate(models: &[MlpModel], shares: &[f64]) -> MlpModel {
    let mut out = models[0].clone();
    for (l, layer) in out.weights_mut().iter_mut().enumerate() {
        for (idx, v) in layer.as_mut_slice().iter_mut().enumerate() {
            *v = models
                .iter()
                .zip(shares)
                .map(|(m, s)| s * m.weights()[l].as_slice()[idx])
                .sum();
        }
    }
    out
}

/// Per-node unit-weight samples for the given shards.
pub fn node_samples<'a>(data: &'a Dataset, shards: &[Vec<RecordId>]) -> Vec<Vec<Sample<'a>>> {
    shards.iter().map(|ids| data.samples(ids)).collect()
}

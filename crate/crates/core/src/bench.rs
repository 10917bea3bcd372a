//! Experiment orchestration: configuration, the end-to-end pipeline, sweeps
//! and report files.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{
    attack_accuracy, build_attack_sets, extract_coreset_features, extract_fl_features,
    train_coreset_attack, train_fl_attack, Architecture, AttackConfig, AttackSample,
    ExposureLookup, GradientEncoder, MembershipSplit,
};
use crate::clustering::KmeansConfig;
use crate::coreset::{build_distributed_coreset, AllocationRule, GlobalCoreset};
use crate::datakit::{
    generate_synthetic, load_csv, make_membership_split, partition, Dataset, MembershipSizes,
    Partition, RecordId, SynthSpec,
};
use crate::fedsim::{
    coreset_communication_cost, coreset_control_traffic, coreset_record_width,
    federated_train, fl_communication_cost, node_samples, snapshot_epoch_selection,
    FederationConfig, TrainingTranscript,
};
use crate::nn::{test_accuracy, train, Activation, MlpModel, MlpSpec, TrainConfig};
use crate::{derive_seed, Error, Result, StageExt};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Csv { path: PathBuf },
    Synthetic(SynthSpec),
}

impl DatasetSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DatasetSource::Csv { path } => load_csv(path),
            DatasetSource::Synthetic(spec) => generate_synthetic(spec),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApproachSelection {
    Federated,
    Coreset,
    #[default]
    Both,
}

impl ApproachSelection {
    fn runs(self, approach: Approach) -> bool {
        matches!(
            (self, approach),
            (ApproachSelection::Both, _)
                | (ApproachSelection::Federated, Approach::Federated)
                | (ApproachSelection::Coreset, Approach::Coreset)
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederatedSettings {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Snapshots kept for the attacker, spread evenly over the epochs.
    pub snapshot_count: usize,
}

impl Default for FederatedSettings {
    fn default() -> Self {
        FederatedSettings {
            epochs: 100,
            learning_rate: 0.1,
            snapshot_count: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoresetSettings {
    /// Total number of weighted points; equal to the training size selects
    /// the full-data coreset.
    pub size: usize,
    pub center_fraction: f64,
    /// Send k-means centers only (no sampled records).
    pub centers_only: bool,
    /// k values each node profiles; `None` profiles k = 1 only.
    pub k_grid: Option<Vec<usize>>,
    pub kmeans_max_iters: usize,
    /// Target-model training on the coreset.
    pub training: TrainConfig,
    /// Rescale coreset weights to mean 1 before training.
    pub normalize_weights: bool,
    /// Count the weight as a transmitted scalar.
    pub transmit_weights: bool,
    /// Add the construction protocol's control messages to the cost.
    pub count_control_traffic: bool,
    pub architectures: Vec<Architecture>,
    /// Write `coreset_dump.csv` for the first seed.
    pub dump: bool,
}

impl Default for CoresetSettings {
    fn default() -> Self {
        CoresetSettings {
            size: 1500,
            center_fraction: 14.0 / 15.0,
            centers_only: false,
            k_grid: None,
            kmeans_max_iters: 100,
            training: TrainConfig::default(),
            normalize_weights: true,
            transmit_weights: false,
            count_control_traffic: false,
            architectures: vec![
                Architecture::CoresetConcatenation,
                Architecture::CoresetHierarchical,
            ],
            dump: false,
        }
    }
}

impl CoresetSettings {
    fn rule(&self) -> AllocationRule {
        AllocationRule::Proportional {
            center_fraction: if self.centers_only { 1.0 } else { self.center_fraction },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Epochs,
    CoresetSize,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Epochs => "epochs",
            SweepAxis::CoresetSize => "coreset_size",
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "epochs" => Ok(SweepAxis::Epochs),
            "coreset_size" | "coreset-size" => Ok(SweepAxis::CoresetSize),
            _ => Err(Error::Config(format!("unknown sweep axis {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSettings {
    pub axis: SweepAxis,
    pub values: Vec<usize>,
    #[serde(default)]
    pub with_attacks: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset: DatasetSource,
    pub train_size: usize,
    pub test_size: usize,
    pub num_nodes: usize,
    /// Hidden widths of the target MLP; input and output widths come from the data.
    pub hidden_layers: Vec<usize>,
    #[serde(default)]
    pub hidden_activation: Activation,
    #[serde(default)]
    pub approach: ApproachSelection,
    #[serde(default)]
    pub federated: FederatedSettings,
    #[serde(default)]
    pub coreset: CoresetSettings,
    pub membership: MembershipSizes,
    #[serde(default)]
    pub attack: AttackConfig,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub sweep: Option<SweepSettings>,
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Checks everything that does not need the data.
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(invalid("at least one seed is required"));
        }
        if self.num_nodes == 0 {
            return Err(invalid("num_nodes must be positive"));
        }
        if self.train_size < self.num_nodes || self.test_size == 0 {
            return Err(invalid("every node needs a training record and the test set must be nonempty"));
        }
        if self.hidden_layers.is_empty() || self.hidden_layers.contains(&0) {
            return Err(invalid("hidden_layers must list at least one positive width"));
        }
        let f = &self.federated;
        if f.epochs == 0 || !(f.learning_rate > 0.0) {
            return Err(invalid("federated epochs and learning rate must be positive"));
        }
        if f.snapshot_count == 0 || f.snapshot_count > f.epochs {
            return Err(invalid(format!(
                "snapshot_count {} must lie in 1..={}",
                f.snapshot_count, f.epochs
            )));
        }
        let c = &self.coreset;
        if c.size < self.num_nodes || c.size > self.train_size {
            return Err(invalid(format!(
                "coreset size {} must lie in {}..={}",
                c.size, self.num_nodes, self.train_size
            )));
        }
        if !(0.0..=1.0).contains(&c.center_fraction) {
            return Err(invalid("center_fraction must lie in [0, 1]"));
        }
        if c.k_grid.as_ref().is_some_and(|g| g.is_empty() || g.contains(&0)) {
            return Err(invalid("k_grid values must be positive"));
        }
        if c.training.epochs == 0 || !(c.training.learning_rate > 0.0) {
            return Err(invalid("coreset training epochs and learning rate must be positive"));
        }
        if c.architectures.is_empty() || c.architectures.contains(&Architecture::FlHierarchical) {
            return Err(invalid("coreset architectures must be concatenation and/or hierarchical"));
        }
        let m = &self.membership;
        if [m.s_train, m.s_test, m.s_prime_train, m.s_prime_test].contains(&0) {
            return Err(invalid("all four membership sets must be nonempty"));
        }
        if m.s_train + m.s_prime_train > self.train_size || m.s_test + m.s_prime_test > self.test_size {
            return Err(invalid("membership sets do not fit in the train/test partition"));
        }
        self.attack.validate().map_err(|e| invalid(e.to_string()))?;
        if let Some(s) = &self.sweep {
            check_sweep_values(s.axis, &s.values, self)?;
        }
        if let DatasetSource::Synthetic(spec) = &self.dataset {
            spec.validate().map_err(|e| invalid(e.to_string()))?;
            self.validate_against_size(spec.num_records)?;
        }
        Ok(())
    }

    fn validate_against_size(&self, records: usize) -> Result<()> {
        if self.train_size + self.test_size > records {
            return Err(invalid(format!(
                "train {} + test {} exceeds the {records} records available",
                self.train_size, self.test_size
            )));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn target_spec(&self, data: &Dataset) -> Result<MlpSpec> {
        let mut widths = vec![data.feature_dim()];
        widths.extend_from_slice(&self.hidden_layers);
        widths.push(data.num_classes());
        MlpSpec::new(widths, self.hidden_activation)
    }
}

fn check_sweep_values(axis: SweepAxis, values: &[usize], cfg: &ExperimentConfig) -> Result<()> {
    if values.is_empty() {
        return Err(invalid("sweep needs at least one value"));
    }
    if values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(invalid("sweep values must be strictly ascending"));
    }
    match axis {
        SweepAxis::Epochs => {
            if values[0] == 0 {
                return Err(invalid("epoch values must be positive"));
            }
            if values[0] < cfg.federated.snapshot_count {
                return Err(invalid("every epoch value must allow the configured snapshot count"));
            }
        }
        SweepAxis::CoresetSize => {
            if values[0] < cfg.num_nodes || values[values.len() - 1] > cfg.train_size {
                return Err(invalid(format!(
                    "coreset sizes must lie in {}..={}",
                    cfg.num_nodes, cfg.train_size
                )));
            }
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Approach {
    Federated,
    Coreset,
}

impl fmt::Display for Approach {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Approach::Federated => "federated",
            Approach::Coreset => "coreset",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowKind {
    Seed,
    Median,
}

/// One row of results: accuracy, leakage and cost of one approach.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TradeoffReport {
    pub approach: Approach,
    pub row: RowKind,
    pub seed: Option<u64>,
    pub target_accuracy: f64,
    /// Attack accuracy; for coresets the larger of the two architectures.
    pub leakage: Option<f64>,
    pub leakage_concatenation: Option<f64>,
    pub leakage_hierarchical: Option<f64>,
    pub scalars_transmitted: u64,
    pub epochs: Option<usize>,
    pub coreset_size: Option<usize>,
    pub exposed_samples: Option<usize>,
    pub wall_clock_secs: f64,
    pub config_hash: String,
    pub notes: String,
}

impl TradeoffReport {
    /// Equal up to wall-clock time and float noise.
    pub fn same_result(&self, other: &Self, tol: f64) -> bool {
        let close = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(a), Some(b)) => (a - b).abs() <= tol,
            (None, None) => true,
            _ => false,
        };
        self.approach == other.approach
            && self.row == other.row
            && self.seed == other.seed
            && (self.target_accuracy - other.target_accuracy).abs() <= tol
            && close(self.leakage, other.leakage)
            && close(self.leakage_concatenation, other.leakage_concatenation)
            && close(self.leakage_hierarchical, other.leakage_hierarchical)
            && self.scalars_transmitted == other.scalars_transmitted
            && self.epochs == other.epochs
            && self.coreset_size == other.coreset_size
            && self.exposed_samples == other.exposed_samples
            && self.config_hash == other.config_hash
            && self.notes == other.notes
    }
}

struct Notes(Vec<String>);

impl Notes {
    fn new() -> Self {
        Notes(Vec::new())
    }

    fn push(&mut self, note: impl Into<String>) {
        self.0.push(note.into());
    }

    fn finish(self) -> String {
        self.0.join("; ")
    }
}

fn gradient_encoder_note(enc: GradientEncoder) -> String {
    match enc {
        GradientEncoder::Dense => {
            "gradient encoder: fully connected over the flattened gradient in place of a convolution".into()
        }
        GradientEncoder::Conv1d { filters } => {
            format!("gradient encoder: width-1 convolution over output neurons, {filters} filters")
        }
    }
}

/// Everything that stays fixed across seeds.
pub struct Prepared<'a> {
    config: &'a ExperimentConfig,
    data: Dataset,
    spec: MlpSpec,
    hash: String,
}

impl<'a> Prepared<'a> {
    pub fn new(config: &'a ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let data = config.dataset.load().stage("load")?;
        config.validate_against_size(data.len())?;
        let spec = config.target_spec(&data).map_err(|e| invalid(e.to_string()))?;
        Ok(Prepared {
            config,
            data,
            spec,
            hash: config.hash(),
        })
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn partition(&self, seed: u64) -> Result<Partition> {
        let c = self.config;
        partition(&self.data, c.train_size, c.test_size, c.num_nodes, derive_seed(seed, 1)).stage("partition")
    }

    fn accuracy(&self, model: &MlpModel, test: &[RecordId]) -> Result<f64> {
        test_accuracy(model, self.data.records(test))
    }

    fn base_notes(&self) -> Notes {
        let mut n = Notes::new();
        if matches!(self.config.dataset, DatasetSource::Synthetic(_)) {
            n.push(format!("synthetic data ({})", self.data.provenance()));
        }
        n
    }

    /// Federated training only.
    pub fn train_federated(&self, part: &Partition, epochs: usize, seed: u64) -> Result<TrainingTranscript> {
        let f = &self.config.federated;
        let cfg = FederationConfig {
            num_nodes: self.config.num_nodes,
            epochs,
            learning_rate: f.learning_rate,
            seed: derive_seed(seed, 2),
            snapshot_epochs: snapshot_epoch_selection(epochs, f.snapshot_count.min(epochs))?,
        };
        federated_train(&node_samples(&self.data, &part.shards), self.spec.clone(), &cfg)
            .stage("federated training")
    }

    pub fn fl_attack_samples(&self, transcript: &TrainingTranscript, split: &MembershipSplit) -> Result<(Vec<AttackSample>, Vec<AttackSample>)> {
        let sets = build_attack_sets(split, |id| {
            Ok(extract_fl_features(transcript, self.data.features(id), self.data.label(id))?.into_blocks())
        })
        .stage("federated attack features")?;
        Ok((sets.train, sets.eval))
    }

    /// Attack accuracy against a federated transcript.
    pub fn fl_leakage(&self, transcript: &TrainingTranscript, part: &Partition, seed: u64) -> Result<f64> {
        let split = make_membership_split(
            &part.train(),
            &part.test,
            &self.config.membership,
            &BTreeSet::new(),
            derive_seed(seed, 3),
        )
        .stage("membership split")?;
        let (train_set, eval) = self.fl_attack_samples(transcript, &split)?;
        let probe = extract_fl_features(transcript, self.data.features(split.s_train[0]), self.data.label(split.s_train[0]))?;
        let layout = probe
            .layout()
            .ok_or_else(|| Error::domain("transcript has no snapshots"))?;
        let model = train_fl_attack(&train_set, &layout, &self.config.attack, derive_seed(seed, 4))
            .stage("federated attack training")?;
        attack_accuracy(&model, &eval).stage("federated attack evaluation")
    }

    pub fn run_federated(&self, part: &Partition, seed: u64, epochs: usize, attack: bool) -> Result<TradeoffReport> {
        let start = Instant::now();
        let transcript = self.train_federated(part, epochs, seed)?;
        let target_accuracy = self.accuracy(&transcript.final_model, &part.test)?;
        let leakage = if attack {
            Some(self.fl_leakage(&transcript, part, seed)?)
        } else {
            None
        };
        let mut notes = self.base_notes();
        if attack {
            notes.push(gradient_encoder_note(self.config.attack.gradient_encoder));
        }
        debug_assert_eq!(
            transcript.scalars_transmitted,
            fl_communication_cost(&self.spec, epochs, self.config.num_nodes)
        );
        Ok(TradeoffReport {
            approach: Approach::Federated,
            row: RowKind::Seed,
            seed: Some(seed),
            target_accuracy,
            leakage,
            leakage_concatenation: None,
            leakage_hierarchical: None,
            scalars_transmitted: transcript.scalars_transmitted,
            epochs: Some(epochs),
            coreset_size: None,
            exposed_samples: None,
            wall_clock_secs: start.elapsed().as_secs_f64(),
            config_hash: self.hash.clone(),
            notes: notes.finish(),
        })
    }

    pub fn build_coreset(&self, part: &Partition, size: usize, seed: u64) -> Result<GlobalCoreset> {
        let c = &self.config.coreset;
        let kcfg = KmeansConfig {
            seed: derive_seed(seed, 5),
            max_iters: c.kmeans_max_iters,
            ..KmeansConfig::default()
        };
        let (_, coreset) = build_distributed_coreset(
            &self.data,
            &part.shards,
            size,
            &c.rule(),
            c.k_grid.as_deref(),
            &kcfg,
        )
        .stage("coreset construction")?;
        Ok(coreset)
    }

    /// Target model trained centrally on the coreset.
    pub fn train_on_coreset(&self, coreset: &GlobalCoreset, seed: u64, epochs: usize) -> Result<MlpModel> {
        let c = &self.config.coreset;
        let samples = coreset.training_samples(&self.data, c.normalize_weights);
        let init = MlpModel::init(self.spec.clone(), derive_seed(seed, 6));
        let cfg = TrainConfig {
            epochs,
            seed: derive_seed(seed, 7),
            ..c.training.clone()
        };
        train(&init, &samples, &cfg).stage("coreset training")
    }

    /// Attack accuracy per requested architecture, in config order.
    pub fn coreset_leakage(&self, coreset: &GlobalCoreset, part: &Partition, seed: u64) -> Result<Vec<(Architecture, f64)>> {
        let archs = &self.config.coreset.architectures;
        let train_ids = part.train();
        if coreset.exposes_all(&train_ids) {
            let split = make_membership_split(
                &train_ids,
                &part.test,
                &self.config.membership,
                &BTreeSet::new(),
                derive_seed(seed, 3),
            )
            .stage("membership split")?;
            let sets = build_attack_sets(&split, |_| Ok(Vec::new()))?;
            let acc = attack_accuracy(&ExposureLookup(coreset.exposed_samples()), &sets.eval)?;
            return Ok(archs.iter().map(|&a| (a, acc)).collect());
        }
        let split = make_membership_split(
            &train_ids,
            &part.test,
            &self.config.membership,
            coreset.exposed_samples(),
            derive_seed(seed, 3),
        )
        .stage("membership split")?;
        let sets = build_attack_sets(&split, |id| {
            Ok(extract_coreset_features(coreset, self.data.features(id))?.into_blocks())
        })
        .stage("coreset attack features")?;
        archs
            .iter()
            .map(|&arch| {
                let model = train_coreset_attack(
                    &sets.train,
                    arch,
                    coreset.center_boundaries(),
                    &self.config.attack,
                    derive_seed(seed, 8),
                )
                .stage("coreset attack training")?;
                Ok((arch, attack_accuracy(&model, &sets.eval).stage("coreset attack evaluation")?))
            })
            .collect()
    }

    pub fn coreset_cost(&self, coreset: &GlobalCoreset, size: usize) -> Result<u64> {
        let c = &self.config.coreset;
        let width = coreset_record_width(self.data.feature_dim(), c.transmit_weights);
        let mut cost = coreset_communication_cost(size, width)?;
        if c.count_control_traffic && !coreset.is_full_data() {
            let grid = c.k_grid.as_ref().map_or(1, Vec::len);
            cost += coreset_control_traffic(&vec![grid; self.config.num_nodes]);
        }
        Ok(cost)
    }

    pub fn run_coreset(&self, part: &Partition, seed: u64, size: usize, epochs: usize, attack: bool) -> Result<TradeoffReport> {
        let start = Instant::now();
        let coreset = self.build_coreset(part, size, seed)?;
        let model = self.train_on_coreset(&coreset, seed, epochs)?;
        let target_accuracy = self.accuracy(&model, &part.test)?;
        let mut notes = self.base_notes();
        if coreset.is_centers_only() {
            notes.push("centers only");
        }
        if coreset.is_full_data() {
            notes.push("full-data coreset");
        }
        let deficiency: f64 = coreset.nodes().iter().map(|n| n.clipped_deficiency).sum();
        if deficiency > 0.0 {
            notes.push(format!("clipped center weight {deficiency:.6}"));
        }
        let (mut concat, mut hier) = (None, None);
        if attack {
            if coreset.exposes_all(&part.train()) {
                notes.push("full exposure: leakage by direct lookup");
            }
            for (arch, acc) in self.coreset_leakage(&coreset, part, seed)? {
                match arch {
                    Architecture::CoresetConcatenation => concat = Some(acc),
                    Architecture::CoresetHierarchical => hier = Some(acc),
                    Architecture::FlHierarchical => {}
                }
            }
        }
        let leakage = match (concat, hier) {
            (Some(a), Some(b)) => Some(a.max(b)),
            (a, b) => a.or(b),
        };
        Ok(TradeoffReport {
            approach: Approach::Coreset,
            row: RowKind::Seed,
            seed: Some(seed),
            target_accuracy,
            leakage,
            leakage_concatenation: concat,
            leakage_hierarchical: hier,
            scalars_transmitted: self.coreset_cost(&coreset, size)?,
            epochs: Some(epochs),
            coreset_size: Some(size),
            exposed_samples: Some(coreset.exposed_samples().len()),
            wall_clock_secs: start.elapsed().as_secs_f64(),
            config_hash: self.hash.clone(),
            notes: notes.finish(),
        })
    }

    fn dump_coreset(&self, part: &Partition, seed: u64, dir: &Path) -> Result<()> {
        let coreset = self.build_coreset(part, self.config.coreset.size, seed)?;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        coreset.write_csv(&self.data, dir.join("coreset_dump.csv"))
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn median_opt(v: Vec<Option<f64>>) -> Option<f64> {
    let vals: Option<Vec<f64>> = v.into_iter().collect();
    vals.filter(|v| !v.is_empty()).map(median)
}

/// Median-over-seeds row for the seed rows of one approach. Notes shared by
/// every seed are kept.
pub fn median_row(rows: &[&TradeoffReport]) -> Option<TradeoffReport> {
    let first = *rows.first()?;
    let mut costs: Vec<u64> = rows.iter().map(|r| r.scalars_transmitted).collect();
    costs.sort_unstable();
    let n = costs.len();
    let cost = if n % 2 == 1 {
        costs[n / 2]
    } else {
        (costs[n / 2 - 1] + costs[n / 2]) / 2
    };
    let pick = |f: fn(&TradeoffReport) -> Option<f64>| median_opt(rows.iter().map(|r| f(r)).collect());
    let notes: Vec<&str> = first
        .notes
        .split("; ")
        .filter(|n| !n.is_empty() && rows.iter().all(|r| r.notes.split("; ").any(|m| m == *n)))
        .collect();
    let same = |f: fn(&TradeoffReport) -> Option<usize>| {
        let v = f(first);
        rows.iter().all(|r| f(r) == v).then_some(v).flatten()
    };
    Some(TradeoffReport {
        approach: first.approach,
        row: RowKind::Median,
        seed: None,
        target_accuracy: median(rows.iter().map(|r| r.target_accuracy).collect()),
        leakage: pick(|r| r.leakage),
        leakage_concatenation: pick(|r| r.leakage_concatenation),
        leakage_hierarchical: pick(|r| r.leakage_hierarchical),
        scalars_transmitted: cost,
        epochs: same(|r| r.epochs),
        coreset_size: same(|r| r.coreset_size),
        exposed_samples: same(|r| r.exposed_samples),
        wall_clock_secs: median(rows.iter().map(|r| r.wall_clock_secs).collect()),
        config_hash: first.config_hash.clone(),
        notes: notes.join("; "),
    })
}

fn with_medians(seed_rows: Vec<TradeoffReport>) -> Vec<TradeoffReport> {
    let mut out = seed_rows;
    for approach in [Approach::Federated, Approach::Coreset] {
        let rows: Vec<&TradeoffReport> = out.iter().filter(|r| r.approach == approach).collect();
        if rows.len() > 1 {
            out.extend(median_row(&rows));
        }
    }
    out
}

/// Runs the full pipeline for every seed: one row per approach per seed,
/// followed by a median row per approach when there are several seeds.
///
/// If a seed fails and an output directory is configured, the rows that did
/// finish are written to `report.partial.csv` before the error is returned.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<TradeoffReport>> {
    let prep = Prepared::new(config)?;
    let approach = config.approach;
    let per_seed: Vec<Result<Vec<TradeoffReport>>> = config
        .seeds
        .par_iter()
        .map(|&seed| {
            let part = prep.partition(seed)?;
            let mut rows = Vec::new();
            if approach.runs(Approach::Federated) {
                rows.push(prep.run_federated(&part, seed, config.federated.epochs, true)?);
            }
            if approach.runs(Approach::Coreset) {
                rows.push(prep.run_coreset(&part, seed, config.coreset.size, config.coreset.training.epochs, true)?);
            }
            Ok(rows)
        })
        .collect();
    let mut rows = Vec::new();
    let mut failure = None;
    for r in per_seed {
        match r {
            Ok(v) => rows.extend(v),
            Err(e) if failure.is_none() => failure = Some(e),
            Err(_) => {}
        }
    }
    if let Some(err) = failure {
        if let (Some(dir), false) = (&config.out_dir, rows.is_empty()) {
            if let Err(e) = write_csv(&rows, &dir.join("report.partial.csv")) {
                log::warn!("could not flush partial results: {e}");
            }
        }
        return Err(err);
    }
    rows.sort_by_key(|r| (r.approach, r.seed));
    if approach.runs(Approach::Coreset) && config.coreset.dump {
        if let Some(dir) = &config.out_dir {
            let seed = config.seeds[0];
            prep.dump_coreset(&prep.partition(seed)?, seed, dir)?;
        }
    }
    Ok(with_medians(rows))
}

/// One measurement on a sweep curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurvePoint {
    pub axis: SweepAxis,
    pub value: usize,
    pub approach: Approach,
    pub row: RowKind,
    pub seed: Option<u64>,
    pub target_accuracy: f64,
    pub leakage: Option<f64>,
    pub scalars_transmitted: u64,
}

/// Target accuracy (and leakage with `with_attacks`) at every sweep value,
/// per seed, plus a median row per value when there are several seeds.
///
/// The epochs axis varies federated epochs and coreset training epochs; the
/// coreset-size axis applies to the coreset approach only.
pub fn sweep(config: &ExperimentConfig, axis: SweepAxis, values: &[usize], with_attacks: bool) -> Result<Vec<CurvePoint>> {
    check_sweep_values(axis, values, config)?;
    let prep = Prepared::new(config)?;
    let mut approaches = Vec::new();
    if config.approach.runs(Approach::Federated) && axis == SweepAxis::Epochs {
        approaches.push(Approach::Federated);
    }
    if config.approach.runs(Approach::Coreset) {
        approaches.push(Approach::Coreset);
    }
    if approaches.is_empty() {
        return Err(invalid("the coreset-size axis needs the coreset approach"));
    }
    let jobs: Vec<(Approach, usize, u64)> = approaches
        .iter()
        .flat_map(|&a| values.iter().flat_map(move |&v| config.seeds.iter().map(move |&s| (a, v, s))))
        .collect();
    let seed_points = jobs
        .par_iter()
        .map(|&(approach, value, seed)| {
            let part = prep.partition(seed)?;
            let report = match (approach, axis) {
                (Approach::Federated, _) => prep.run_federated(&part, seed, value, with_attacks)?,
                (Approach::Coreset, SweepAxis::Epochs) => {
                    prep.run_coreset(&part, seed, config.coreset.size, value, with_attacks)?
                }
                (Approach::Coreset, SweepAxis::CoresetSize) => {
                    prep.run_coreset(&part, seed, value, config.coreset.training.epochs, with_attacks)?
                }
            };
            Ok(CurvePoint {
                axis,
                value,
                approach,
                row: RowKind::Seed,
                seed: Some(seed),
                target_accuracy: report.target_accuracy,
                leakage: report.leakage,
                scalars_transmitted: report.scalars_transmitted,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(seed_points.len() + values.len() * approaches.len());
    for chunk in seed_points.chunk_by(|a, b| a.approach == b.approach && a.value == b.value) {
        out.extend_from_slice(chunk);
        if chunk.len() == 1 {
            continue;
        }
        let mut costs: Vec<u64> = chunk.iter().map(|p| p.scalars_transmitted).collect();
        costs.sort_unstable();
        out.push(CurvePoint {
            row: RowKind::Median,
            seed: None,
            target_accuracy: median(chunk.iter().map(|p| p.target_accuracy).collect()),
            leakage: median_opt(chunk.iter().map(|p| p.leakage).collect()),
            scalars_transmitted: costs[(costs.len() - 1) / 2],
            ..chunk[0].clone()
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Json,
}

const REPORT_FORMAT: &str = "mia-tradeoff/report";
const REPORT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReportFile {
    format: String,
    version: u32,
    reports: Vec<TradeoffReport>,
}

fn write_csv<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `report.csv` or `report.json` into `dir` and returns its path.
pub fn emit_report(reports: &[TradeoffReport], format: ReportFormat, dir: &Path) -> Result<PathBuf> {
    if reports.is_empty() {
        return Err(Error::domain("no reports to write"));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    match format {
        ReportFormat::Csv => {
            let path = dir.join("report.csv");
            write_csv(reports, &path)?;
            Ok(path)
        }
        ReportFormat::Json => {
            let path = dir.join("report.json");
            let file = ReportFile {
                format: REPORT_FORMAT.into(),
                version: REPORT_VERSION,
                reports: reports.to_vec(),
            };
            let mut text = serde_json::to_string_pretty(&file)?;
            text.push('\n');
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            Ok(path)
        }
    }
}

/// Reads a report written by [`emit_report`]; the format follows the extension.
pub fn load_report(path: &Path) -> Result<Vec<TradeoffReport>> {
    if path.extension().is_some_and(|e| e == "json") {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ReportFile = serde_json::from_str(&text)?;
        if file.format != REPORT_FORMAT || file.version != REPORT_VERSION {
            return Err(Error::domain(format!(
                "{}: not a version {REPORT_VERSION} report file",
                path.display()
            )));
        }
        Ok(file.reports)
    } else {
        let mut r = csv::Reader::from_path(path)?;
        r.deserialize().map(|row| row.map_err(Error::from)).collect()
    }
}

pub fn emit_curve(points: &[CurvePoint], dir: &Path) -> Result<PathBuf> {
    let axis = points
        .first()
        .ok_or_else(|| Error::domain("empty curve"))?
        .axis;
    let path = dir.join(format!("curve_{}.csv", axis.name()));
    write_csv(points, &path)?;
    Ok(path)
}

/// Prints reports as an aligned plain-text table.
pub fn write_table(reports: &[TradeoffReport], mut out: impl Write) -> std::io::Result<()> {
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{:.1}%", 100.0 * x));
    writeln!(
        out,
        "{:<10} {:>7} {:>9} {:>9} {:>15}  notes",
        "approach", "seed", "accuracy", "leakage", "cost"
    )?;
    for r in reports {
        let seed = r.seed.map_or_else(|| "median".to_string(), |s| s.to_string());
        writeln!(
            out,
            "{:<10} {:>7} {:>9} {:>9} {:>15}  {}",
            r.approach.to_string(),
            seed,
            fmt(Some(r.target_accuracy)),
            fmt(r.leakage),
            r.scalars_transmitted,
            r.notes
        )?;
    }
    Ok(())
}

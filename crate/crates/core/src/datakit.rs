//! Datasets of binary feature vectors with class labels: CSV ingestion,
//! synthetic generation, node partitioning and membership splits.
//!
//! Records are identified by their index in the source [`Dataset`]
//! ([`RecordId`]), never by value, so duplicate rows keep distinct
//! membership.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::attacks::MembershipSplit;
use crate::nn::Sample;
use crate::{derive_seed, rng_from_seed, Error, Result};

/// Index of a record in its source dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RecordId(pub usize);

impl fmt::Display for RecordId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Vec<Vec<f64>>,
    labels: Vec<usize>,
    num_classes: usize,
    feature_dim: usize,
    provenance: String,
}

impl Dataset {
    pub fn new(
        features: Vec<Vec<f64>>,
        labels: Vec<usize>,
        num_classes: usize,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(Error::domain("feature and label counts differ"));
        }
        let feature_dim = features.first().map_or(0, Vec::len);
        for (i, (x, &y)) in features.iter().zip(&labels).enumerate() {
            if x.len() != feature_dim {
                return Err(Error::domain(format!("record {i} has {} features, expected {feature_dim}", x.len())));
            }
            if x.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::domain(format!("record {i} has a non-binary feature")));
            }
            if y >= num_classes {
                return Err(Error::domain(format!("record {i} has label {y} >= {num_classes}")));
            }
        }
        Ok(Dataset {
            features,
            labels,
            num_classes,
            feature_dim,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn features(&self, id: RecordId) -> &[f64] {
        &self.features[id.0]
    }

    pub fn label(&self, id: RecordId) -> usize {
        self.labels[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = RecordId> {
        (0..self.len()).map(RecordId)
    }

    /// `(features, label)` pairs for the given records.
    pub fn records<'a>(
        &'a self,
        ids: &'a [RecordId],
    ) -> impl Iterator<Item = (&'a [f64], usize)> + 'a {
        ids.iter().map(move |&id| (self.features(id), self.label(id)))
    }

    /// Unit-weight training samples for the given records.
    pub fn samples(&self, ids: &[RecordId]) -> Vec<Sample<'_>> {
        ids.iter()
            .map(|&id| Sample::new(self.features(id), self.label(id)))
            .collect()
    }
}

/// Reads a dataset whose first column is an integer label and whose
/// remaining columns are 0/1 features. A header row is detected and skipped.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_csv(file, &path.display().to_string())
}

pub fn parse_csv<R: Read>(reader: R, provenance: &str) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut width: Option<usize> = None;
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::Parse {
            row,
            message: e.to_string(),
        })?;
        let Some(first) = rec.get(0) else { continue };
        let label = match first.parse::<usize>() {
            Ok(l) => l,
            Err(_) if row == 1 => continue,
            Err(_) => {
                return Err(Error::Parse {
                    row,
                    message: format!("label {first:?} is not a nonnegative integer"),
                })
            }
        };
        let w = *width.get_or_insert(rec.len());
        if rec.len() != w {
            return Err(Error::Parse {
                row,
                message: format!("expected {w} columns, found {}", rec.len()),
            });
        }
        let x = rec
            .iter()
            .skip(1)
            .enumerate()
            .map(|(c, v)| match v.parse::<f64>() {
                Ok(b) if b == 0.0 || b == 1.0 => Ok(b),
                _ => Err(Error::Parse {
                    row,
                    message: format!("feature {} = {v:?} is not binary", c + 1),
                }),
            })
            .collect::<Result<Vec<f64>>>()?;
        features.push(x);
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(Error::Parse {
            row: 0,
            message: "no data rows".into(),
        });
    }
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(features, labels, num_classes, provenance)
}

/// Class-prototype generator: each class gets a random binary prototype and
/// every record flips each prototype bit with probability `flip_rate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub num_records: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub flip_rate: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.flip_rate > 0.0 && self.flip_rate < 0.5) {
            return Err(Error::domain(format!("flip rate {} outside (0, 0.5)", self.flip_rate)));
        }
        if self.num_classes == 0 || self.feature_dim == 0 {
            return Err(Error::domain("synthetic data needs at least one class and one feature"));
        }
        if self.num_records < self.num_classes {
            return Err(Error::domain("fewer records than classes"));
        }
        Ok(())
    }

    /// Same shape as the Locations dataset: 5010 records, 446 features, 30 classes.
    pub fn locations_like(flip_rate: f64, seed: u64) -> Self {
        SynthSpec {
            num_records: 5010,
            feature_dim: 446,
            num_classes: 30,
            flip_rate,
            seed,
        }
    }
}

pub fn generate_synthetic(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = rng_from_seed(spec.seed);
    let prototypes: Vec<Vec<bool>> = (0..spec.num_classes)
        .map(|_| (0..spec.feature_dim).map(|_| rng.gen_bool(0.5)).collect())
        .collect();
    let mut features = Vec::with_capacity(spec.num_records);
    let mut labels = Vec::with_capacity(spec.num_records);
    for i in 0..spec.num_records {
        let y = i % spec.num_classes;
        let x = prototypes[y]
            .iter()
            .map(|&bit| {
                let flipped = bit ^ rng.gen_bool(spec.flip_rate);
                if flipped { 1.0 } else { 0.0 }
            })
            .collect();
        features.push(x);
        labels.push(y);
    }
    let provenance = format!(
        "synthetic(n={}, d={}, C={}, flip={}, seed={})",
        spec.num_records, spec.feature_dim, spec.num_classes, spec.flip_rate, spec.seed
    );
    Dataset::new(features, labels, spec.num_classes, provenance)
}

/// Training shards per node plus the held-out test set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub shards: Vec<Vec<RecordId>>,
    pub test: Vec<RecordId>,
}

impl Partition {
    /// Union of all shards, in node order.
    pub fn train(&self) -> Vec<RecordId> {
        self.shards.iter().flatten().copied().collect()
    }

    pub fn train_size(&self) -> usize {
        self.shards.iter().map(Vec::len).sum()
    }
}

pub fn partition(
    dataset: &Dataset,
    train_size: usize,
    test_size: usize,
    num_nodes: usize,
    seed: u64,
) -> Result<Partition> {
    if num_nodes == 0 {
        return Err(Error::domain("at least one node is required"));
    }
    if train_size + test_size > dataset.len() {
        return Err(Error::domain(format!(
            "train {train_size} + test {test_size} exceeds {} records",
            dataset.len()
        )));
    }
    if train_size < num_nodes {
        return Err(Error::domain("every node needs at least one training record"));
    }
    let mut ids: Vec<RecordId> = dataset.ids().collect();
    ids.shuffle(&mut rng_from_seed(seed));
    let base = train_size / num_nodes;
    let extra = train_size % num_nodes;
    let mut shards = Vec::with_capacity(num_nodes);
    let mut start = 0;
    for node in 0..num_nodes {
        let len = base + usize::from(node < extra);
        shards.push(ids[start..start + len].to_vec());
        start += len;
    }
    let test = ids[train_size..train_size + test_size].to_vec();
    Ok(Partition { shards, test })
}

/// Cardinalities of the four membership sets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MembershipSizes {
    /// Leaked members used to train the attack.
    pub s_train: usize,
    /// Leaked non-members used to train the attack.
    pub s_test: usize,
    /// Held-out members used to evaluate the attack.
    pub s_prime_train: usize,
    /// Held-out non-members used to evaluate the attack.
    pub s_prime_test: usize,
}

/// Draws the four disjoint membership sets. Records in `exposed` (coreset
/// samples visible to the adversary) are forced into `S_train`.
pub fn make_membership_split(
    d_train: &[RecordId],
    d_test: &[RecordId],
    sizes: &MembershipSizes,
    exposed: &BTreeSet<RecordId>,
    seed: u64,
) -> Result<MembershipSplit> {
    if sizes.s_train + sizes.s_prime_train > d_train.len() {
        return Err(Error::domain(format!(
            "|S_train| + |S'_train| = {} exceeds |D_train| = {}",
            sizes.s_train + sizes.s_prime_train,
            d_train.len()
        )));
    }
    if sizes.s_test + sizes.s_prime_test > d_test.len() {
        return Err(Error::domain(format!(
            "|S_test| + |S'_test| = {} exceeds |D_test| = {}",
            sizes.s_test + sizes.s_prime_test,
            d_test.len()
        )));
    }
    let train_set: BTreeSet<RecordId> = d_train.iter().copied().collect();
    if let Some(id) = exposed.iter().find(|id| !train_set.contains(id)) {
        return Err(Error::domain(format!("exposed record {id} is not a training record")));
    }
    let forced = exposed.len();
    let (s_train_size, s_prime_train_size) = (sizes.s_train.max(forced), sizes.s_prime_train);
    if s_train_size + s_prime_train_size > d_train.len() {
        return Err(Error::domain(format!(
            "{forced} exposed records leave too few training records for |S'_train| = {s_prime_train_size}"
        )));
    }

    let mut rest: Vec<RecordId> = d_train.iter().copied().filter(|id| !exposed.contains(id)).collect();
    rest.shuffle(&mut rng_from_seed(derive_seed(seed, 1)));
    let mut s_train: Vec<RecordId> = exposed.iter().copied().collect();
    let fill = s_train_size - forced;
    s_train.extend_from_slice(&rest[..fill]);
    let s_prime_train = rest[fill..fill + s_prime_train_size].to_vec();

    let mut test = d_test.to_vec();
    test.shuffle(&mut rng_from_seed(derive_seed(seed, 2)));
    let s_test = test[..sizes.s_test].to_vec();
    let s_prime_test = test[sizes.s_test..sizes.s_test + sizes.s_prime_test].to_vec();

    let split = MembershipSplit {
        s_train,
        s_test,
        s_prime_train,
        s_prime_test,
    };
    split.validate()?;
    Ok(split)
}

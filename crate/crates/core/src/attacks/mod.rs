//! Membership-inference attacks against the two training approaches.
//!
//! The adversary knows part of the target's training data (`S_train`, labelled
//! IN) and part of its test data (`S_test`, labelled OUT) and trains a binary
//! classifier on features the target exposes for those records:
//!
//! * federated learning: per snapshot epoch, the last-layer gradient, the
//!   last hidden activation, the output probabilities, the one-hot label and
//!   the loss;
//! * coreset sharing: the Euclidean distances from the record to every
//!   k-means center reported by every node.
//!
//! Leakage is the attack's accuracy on held-out members `S'_train` and
//! non-members `S'_test`.

mod features;
mod model;

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use features::{
    extract_coreset_features, extract_fl_features, CoresetAttackFeatures, FlAttackFeatures,
    FlLayout, SnapshotFeatures,
};
pub use model::{
    train_coreset_attack, train_fl_attack, Architecture, AttackConfig, AttackModel,
    GradientEncoder,
};

use crate::datakit::RecordId;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Membership {
    In,
    Out,
}

impl Membership {
    /// Output neuron of the attack classifier (IN = 0, so argmax ties go to IN).
    pub fn class(self) -> usize {
        match self {
            Membership::In => 0,
            Membership::Out => 1,
        }
    }

    pub fn from_class(class: usize) -> Self {
        if class == 0 {
            Membership::In
        } else {
            Membership::Out
        }
    }
}

/// The four record sets of the attack experiment.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MembershipSplit {
    /// Training records known to the adversary.
    pub s_train: Vec<RecordId>,
    /// Test records known to the adversary.
    pub s_test: Vec<RecordId>,
    /// Training records used to score the attack.
    pub s_prime_train: Vec<RecordId>,
    /// Test records used to score the attack.
    pub s_prime_test: Vec<RecordId>,
}

impl MembershipSplit {
    pub fn validate(&self) -> Result<()> {
        let sets = [
            ("S_train", &self.s_train),
            ("S_test", &self.s_test),
            ("S'_train", &self.s_prime_train),
            ("S'_test", &self.s_prime_test),
        ];
        let mut seen: BTreeSet<RecordId> = BTreeSet::new();
        for (name, ids) in sets {
            for &id in ids {
                if !seen.insert(id) {
                    return Err(Error::domain(format!("record {id} appears twice (in {name})")));
                }
            }
        }
        Ok(())
    }
}

/// One attack example: the feature blocks of a record and its membership.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackSample {
    pub record: RecordId,
    pub membership: Membership,
    pub blocks: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackSets {
    pub train: Vec<AttackSample>,
    pub eval: Vec<AttackSample>,
}

/// Labels `S_train`/`S'_train` IN and `S_test`/`S'_test` OUT and featurizes
/// every record.
pub fn build_attack_sets<F>(split: &MembershipSplit, featurize: F) -> Result<AttackSets>
where
    F: Fn(RecordId) -> Result<Vec<Vec<f64>>> + Sync,
{
    split.validate()?;
    for (name, ids) in [
        ("S_train", &split.s_train),
        ("S_test", &split.s_test),
        ("S'_train", &split.s_prime_train),
        ("S'_test", &split.s_prime_test),
    ] {
        if ids.is_empty() {
            return Err(Error::domain(format!("{name} is empty; the attack needs both classes")));
        }
    }
    let label = |ins: &[RecordId], outs: &[RecordId]| -> Result<Vec<AttackSample>> {
        ins.iter()
            .map(|&id| (id, Membership::In))
            .chain(outs.iter().map(|&id| (id, Membership::Out)))
            .collect::<Vec<_>>()
            .into_par_iter()
            .map(|(record, membership)| {
                Ok(AttackSample {
                    record,
                    membership,
                    blocks: featurize(record)?,
                })
            })
            .collect()
    };
    Ok(AttackSets {
        train: label(&split.s_train, &split.s_test)?,
        eval: label(&split.s_prime_train, &split.s_prime_test)?,
    })
}

/// Anything that labels an attack sample IN or OUT.
pub trait MembershipClassifier {
    fn classify(&self, sample: &AttackSample) -> Result<Membership>;
}

/// Fraction of samples whose membership is predicted correctly.
pub fn attack_accuracy<C: MembershipClassifier + ?Sized>(
    classifier: &C,
    eval: &[AttackSample],
) -> Result<f64> {
    if eval.is_empty() {
        return Err(Error::domain("attack accuracy of an empty evaluation set"));
    }
    let mut correct = 0usize;
    for s in eval {
        if classifier.classify(s)? == s.membership {
            correct += 1;
        }
    }
    Ok(correct as f64 / eval.len() as f64)
}

/// Membership by direct lookup in the set of records the coreset exposes.
pub struct ExposureLookup<'a>(pub &'a BTreeSet<RecordId>);

impl MembershipClassifier for ExposureLookup<'_> {
    fn classify(&self, sample: &AttackSample) -> Result<Membership> {
        Ok(if self.0.contains(&sample.record) {
            Membership::In
        } else {
            Membership::Out
        })
    }
}

/// Writes `membership,record,f_0..` rows (membership 1 = IN), with all
/// feature blocks flattened in order.
pub fn write_attack_csv(samples: &[AttackSample], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    let width = samples.first().map_or(0, |s| s.blocks.iter().map(Vec::len).sum());
    write!(w, "membership,record").map_err(io)?;
    for j in 0..width {
        write!(w, ",f{j}").map_err(io)?;
    }
    writeln!(w).map_err(io)?;
    for s in samples {
        let m = u8::from(s.membership == Membership::In);
        write!(w, "{m},{}", s.record.0).map_err(io)?;
        for v in s.blocks.iter().flatten() {
            write!(w, ",{v}").map_err(io)?;
        }
        writeln!(w).map_err(io)?;
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests;

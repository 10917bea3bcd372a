use std::collections::BTreeSet;

use rand::Rng as _;

use super::*;
use crate::coreset::{merge, CoresetCenter, LocalCoreset};
use crate::datakit::{generate_synthetic, partition, SynthSpec};
use crate::fedsim::{federated_train, node_samples, snapshot_epoch_selection, FederationConfig};
use crate::nn::MlpSpec;
use crate::rng_from_seed;

fn ids(r: std::ops::Range<usize>) -> Vec<RecordId> {
    r.map(RecordId).collect()
}

fn local(node_id: usize, centers: &[&[f64]]) -> LocalCoreset {
    LocalCoreset {
        node_id,
        node_size: 10,
        centers: centers
            .iter()
            .map(|c| CoresetCenter {
                features: c.to_vec(),
                weight: 1.0,
                label: 0,
                cluster_size: 1,
            })
            .collect(),
        samples: Vec::new(),
        construction_seed: 0,
        local_cost: 0.0,
        clipped_deficiency: 0.0,
    }
}

/// IN samples centered at `+shift`, OUT at `-shift`, unit noise.
fn blob_samples(n_per_class: usize, blocks: &[usize], shift: f64, scale: f64, seed: u64) -> Vec<AttackSample> {
    let mut rng = rng_from_seed(seed);
    let mut out = Vec::new();
    for i in 0..2 * n_per_class {
        let membership = if i % 2 == 0 { Membership::In } else { Membership::Out };
        let sign = if membership == Membership::In { 1.0 } else { -1.0 };
        let blocks = blocks
            .iter()
            .map(|&w| {
                (0..w)
                    .map(|_| scale * (sign * shift + rng.gen_range(-1.0..1.0)))
                    .collect()
            })
            .collect();
        out.push(AttackSample {
            record: RecordId(i),
            membership,
            blocks,
        });
    }
    out
}

fn quick_config() -> AttackConfig {
    AttackConfig {
        encoder_width: 8,
        combiner_hidden: vec![16, 8],
        epochs: 30,
        learning_rate: 0.05,
        batch_size: 16,
        ..AttackConfig::default()
    }
}

struct ConstantIn;

impl MembershipClassifier for ConstantIn {
    fn classify(&self, _: &AttackSample) -> Result<Membership> {
        Ok(Membership::In)
    }
}

#[test]
fn attack_sets_are_labelled_and_sized() {
    let split = MembershipSplit {
        s_train: ids(0..1750),
        s_test: ids(10_000..11_750),
        s_prime_train: ids(2000..2250),
        s_prime_test: ids(12_000..12_250),
    };
    let sets = build_attack_sets(&split, |id| Ok(vec![vec![id.0 as f64]])).unwrap();
    assert_eq!(sets.train.len(), 3500);
    assert_eq!(sets.eval.len(), 500);
    let ins = sets.train.iter().filter(|s| s.membership == Membership::In).count();
    assert_eq!(ins, 1750);
    assert!(sets
        .train
        .iter()
        .all(|s| (s.membership == Membership::In) == (s.record.0 < 10_000)));

    let split = MembershipSplit {
        s_train: ids(0..6000),
        s_test: ids(20_000..26_000),
        s_prime_train: ids(6000..8000),
        s_prime_test: ids(26_000..28_000),
    };
    let sets = build_attack_sets(&split, |_| Ok(vec![vec![0.0]])).unwrap();
    assert_eq!((sets.train.len(), sets.eval.len()), (12_000, 4000));
}

#[test]
fn empty_or_overlapping_sets_are_rejected() {
    let mut split = MembershipSplit {
        s_train: ids(0..5),
        s_test: ids(10..15),
        s_prime_train: ids(5..8),
        s_prime_test: Vec::new(),
    };
    assert!(build_attack_sets(&split, |_| Ok(vec![vec![0.0]])).is_err());
    split.s_prime_test = vec![RecordId(3)];
    assert!(split.validate().is_err());
}

#[test]
fn distances_to_centers() {
    let cs = merge(vec![local(0, &[&[3.0, 4.0], &[0.0, 1.0]])], 2).unwrap();
    let f = extract_coreset_features(&cs, &[0.0, 0.0]).unwrap();
    assert_eq!(f.distances, vec![5.0, 1.0]);
    assert_eq!(extract_coreset_features(&cs, &[0.0, 1.0]).unwrap().distances[1], 0.0);
    assert!(extract_coreset_features(&cs, &[0.0]).is_err());
    let empty = merge(vec![local(0, &[])], 2).unwrap();
    assert!(extract_coreset_features(&empty, &[0.0, 0.0]).is_err());
}

#[test]
fn blocks_follow_node_report_order() {
    let a = local(0, &[&[1.0, 0.0]]);
    let b = local(1, &[&[0.0, 3.0], &[0.0, 0.5]]);
    let ab = extract_coreset_features(&merge(vec![a.clone(), b.clone()], 2).unwrap(), &[0.0, 0.0]).unwrap();
    let ba = extract_coreset_features(&merge(vec![b, a], 2).unwrap(), &[0.0, 0.0]).unwrap();
    assert_eq!(ab.clone().into_blocks(), vec![vec![1.0], vec![3.0, 0.5]]);
    assert_eq!(ba.into_blocks(), vec![vec![3.0, 0.5], vec![1.0]]);
    assert_eq!(ab.boundaries, vec![0..1, 1..3]);
}

#[test]
fn fl_features_per_snapshot() {
    let data = generate_synthetic(&SynthSpec {
        num_records: 40,
        feature_dim: 12,
        num_classes: 4,
        flip_rate: 0.3,
        seed: 5,
    })
    .unwrap();
    let part = partition(&data, 20, 20, 2, 5).unwrap();
    let epochs = 200;
    let cfg = FederationConfig {
        num_nodes: 2,
        epochs,
        learning_rate: 0.5,
        seed: 1,
        snapshot_epochs: snapshot_epoch_selection(epochs, 5).unwrap(),
    };
    let spec = MlpSpec::classifier(12, &[16], 4).unwrap();
    let transcript = federated_train(&node_samples(&data, &part.shards), spec, &cfg).unwrap();

    let member = part.shards[0][0];
    let f = extract_fl_features(&transcript, data.features(member), data.label(member)).unwrap();
    assert_eq!(f.snapshots.len(), 5);
    let layout = f.layout().unwrap();
    assert_eq!(layout.gradient_shape, (17, 4));
    assert_eq!(layout.activation_width, 16);
    for s in &f.snapshots {
        let expected = -s.output[data.label(member)].ln();
        assert!((s.loss - expected).abs() < 1e-9);
        assert_eq!(s.one_hot.iter().sum::<f64>(), 1.0);
    }
    let last = f.snapshots[4].loss;
    for s in &f.snapshots[..4] {
        assert!(last < s.loss, "final loss {last} vs {} at epoch {}", s.loss, s.epoch);
    }

    let blocks = f.into_blocks();
    assert_eq!(blocks.len(), 25);
    assert_eq!(
        blocks.iter().map(Vec::len).collect::<Vec<_>>()[..5],
        layout.block_widths()[..5]
    );
}

#[test]
fn constant_classifier_scores_half() {
    let eval = blob_samples(50, &[1], 1.0, 1.0, 0);
    assert_eq!(attack_accuracy(&ConstantIn, &eval).unwrap(), 0.5);
    assert!(attack_accuracy(&ConstantIn, &[]).is_err());
}

#[test]
fn exposure_lookup_is_exact() {
    let eval = blob_samples(20, &[1], 1.0, 1.0, 0);
    let exposed: BTreeSet<RecordId> = eval
        .iter()
        .filter(|s| s.membership == Membership::In)
        .map(|s| s.record)
        .collect();
    assert_eq!(attack_accuracy(&ExposureLookup(&exposed), &eval).unwrap(), 1.0);
}

#[test]
fn separable_features_are_learned_by_each_architecture() {
    let widths = [3, 2, 4];
    let train = blob_samples(100, &widths, 1.5, 1.0, 1);
    let eval = blob_samples(50, &widths, 1.5, 1.0, 2);
    let boundaries = vec![0..3, 3..5, 5..9];
    for arch in [Architecture::CoresetConcatenation, Architecture::CoresetHierarchical] {
        let m = train_coreset_attack(&train, arch, &boundaries, &quick_config(), 3).unwrap();
        let acc = attack_accuracy(&m, &eval).unwrap();
        assert!(acc > 0.95, "{arch:?}: {acc}");
    }
}

#[test]
fn chance_level_without_signal() {
    let cfg = quick_config();
    let mut accs = Vec::new();
    for seed in 0..5 {
        let train = blob_samples(100, &[4], 0.0, 1.0, seed);
        let eval = blob_samples(100, &[4], 0.0, 1.0, 100 + seed);
        let m = train_coreset_attack(&train, Architecture::CoresetConcatenation, &[0..4], &cfg, seed).unwrap();
        accs.push(attack_accuracy(&m, &eval).unwrap());
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    assert!((0.4..=0.6).contains(&mean), "{accs:?}");
}

#[test]
fn rescaled_features_give_the_same_accuracy() {
    let train = blob_samples(100, &[4], 0.4, 1.0, 4);
    let eval = blob_samples(100, &[4], 0.4, 1.0, 5);
    let rescale = |v: &[AttackSample], c: f64| -> Vec<AttackSample> {
        v.iter()
            .map(|s| AttackSample {
                blocks: s.blocks.iter().map(|b| b.iter().map(|x| x * c).collect()).collect(),
                ..s.clone()
            })
            .collect()
    };
    let cfg = quick_config();
    let base = {
        let m = train_coreset_attack(&train, Architecture::CoresetConcatenation, &[0..4], &cfg, 0).unwrap();
        attack_accuracy(&m, &eval).unwrap()
    };
    for c in [1e-3, 7.0, 1e4] {
        let m = train_coreset_attack(&rescale(&train, c), Architecture::CoresetConcatenation, &[0..4], &cfg, 0).unwrap();
        let acc = attack_accuracy(&m, &rescale(&eval, c)).unwrap();
        assert!((acc - base).abs() < 0.05, "scale {c}: {acc} vs {base}");
    }
}

#[test]
fn single_node_hierarchical_matches_concatenation_in_shape() {
    let train = blob_samples(60, &[3], 1.5, 1.0, 11);
    let eval = blob_samples(30, &[3], 1.5, 1.0, 12);
    let m = train_coreset_attack(&train, Architecture::CoresetHierarchical, &[0..3], &quick_config(), 0).unwrap();
    assert_eq!(m.num_encoders(), 1);
    assert_eq!(m.combiner().spec().layer_widths(), &[16, 8, 2]);
    assert!(attack_accuracy(&m, &eval).unwrap() > 0.95);
}

#[test]
fn training_accuracy_exceeds_held_out_on_average() {
    let cfg = AttackConfig {
        epochs: 60,
        ..quick_config()
    };
    let (mut own, mut held) = (0.0, 0.0);
    for seed in 0..10 {
        let train = blob_samples(30, &[6], 0.3, 1.0, seed);
        let eval = blob_samples(30, &[6], 0.3, 1.0, 50 + seed);
        let m = train_coreset_attack(&train, Architecture::CoresetConcatenation, &[0..6], &cfg, seed).unwrap();
        own += attack_accuracy(&m, &train).unwrap();
        held += attack_accuracy(&m, &eval).unwrap();
    }
    assert!(own >= held, "{own} vs {held}");
}

#[test]
fn fl_attack_with_both_gradient_encoders() {
    let layout = FlLayout {
        snapshots: 2,
        gradient_shape: (3, 2),
        activation_width: 2,
        num_classes: 2,
    };
    let widths = layout.block_widths();
    let train = blob_samples(100, &widths, 1.0, 1.0, 6);
    let eval = blob_samples(50, &widths, 1.0, 1.0, 7);
    for enc in [GradientEncoder::Dense, GradientEncoder::Conv1d { filters: 3 }] {
        let cfg = AttackConfig {
            gradient_encoder: enc,
            ..quick_config()
        };
        let m = train_fl_attack(&train, &layout, &cfg, 0).unwrap();
        assert_eq!(m.num_encoders(), 10);
        assert!(attack_accuracy(&m, &eval).unwrap() > 0.95, "{enc:?}");
    }
}

#[test]
fn training_is_deterministic() {
    let train = blob_samples(40, &[2, 2], 0.5, 1.0, 8);
    let b = vec![0..2, 2..4];
    let a1 = train_coreset_attack(&train, Architecture::CoresetHierarchical, &b, &quick_config(), 9).unwrap();
    let a2 = train_coreset_attack(&train, Architecture::CoresetHierarchical, &b, &quick_config(), 9).unwrap();
    assert_eq!(a1, a2);
}

#[test]
fn malformed_attack_inputs_are_rejected() {
    let cfg = quick_config();
    let mut one_class = blob_samples(10, &[2], 1.0, 1.0, 0);
    one_class.iter_mut().for_each(|s| s.membership = Membership::Out);
    assert!(train_coreset_attack(&one_class, Architecture::CoresetConcatenation, &[0..2], &cfg, 0).is_err());

    let train = blob_samples(10, &[2, 3], 1.0, 1.0, 0);
    assert!(train_coreset_attack(&train, Architecture::CoresetHierarchical, &[0..3, 3..5], &cfg, 0).is_err());
    assert!(train_coreset_attack(&train, Architecture::FlHierarchical, &[0..2, 2..5], &cfg, 0).is_err());
    let m = train_coreset_attack(&train, Architecture::CoresetConcatenation, &[0..2, 2..5], &cfg, 0).unwrap();
    let bad = AttackSample {
        record: RecordId(0),
        membership: Membership::In,
        blocks: vec![vec![0.0; 4]],
    };
    assert!(m.classify(&bad).is_err());
}

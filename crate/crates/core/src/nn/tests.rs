use proptest::prelude::*;
use rand::{Rng as _, SeedableRng};

use super::*;

fn hand_model() -> MlpModel {
    let spec = MlpSpec::new(vec![2, 2, 2], Activation::Tanh).unwrap();
    let w1 = Matrix::from_vec(3, 2, vec![0.5, -1.0, 0.25, 0.5, 0.1, -0.2]).unwrap();
    let w2 = Matrix::from_vec(3, 2, vec![1.0, -1.0, 2.0, 0.5, 0.0, 0.3]).unwrap();
    MlpModel::from_weights(spec, vec![w1, w2]).unwrap()
}

fn loss_at(model: &MlpModel, x: &[f64], y: usize) -> f64 {
    model.forward(x, Some(y)).unwrap().loss.unwrap()
}

/// Central differences over every parameter; returns the worst relative error.
fn finite_difference_error(model: &MlpModel, x: &[f64], y: usize, eps: f64) -> f64 {
    let analytic = model.backward(x, y).unwrap();
    let mut worst: f64 = 0.0;
    for (l, layer) in model.weights().iter().enumerate() {
        for idx in 0..layer.as_slice().len() {
            let mut plus = model.clone();
            plus.weights_mut()[l].as_mut_slice()[idx] += eps;
            let mut minus = model.clone();
            minus.weights_mut()[l].as_mut_slice()[idx] -= eps;
            let numeric = (loss_at(&plus, x, y) - loss_at(&minus, x, y)) / (2.0 * eps);
            let a = analytic.layers()[l].as_slice()[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max(rel);
        }
    }
    worst
}

#[test]
fn one_hot_examples() {
    assert_eq!(one_hot(2, 4).unwrap(), vec![0.0, 0.0, 1.0, 0.0]);
    assert_eq!(one_hot(0, 1).unwrap(), vec![1.0]);
    let v = one_hot(29, 30).unwrap();
    assert_eq!(v.len(), 30);
    assert_eq!(v[29], 1.0);
    assert_eq!(v.iter().sum::<f64>(), 1.0);
    assert!(matches!(one_hot(4, 4), Err(Error::Domain(_))));
}

#[test]
fn spec_validation_and_param_count() {
    assert!(MlpSpec::new(vec![3], Activation::Tanh).is_err());
    assert!(MlpSpec::new(vec![3, 0, 2], Activation::Tanh).is_err());
    let loc = MlpSpec::classifier(446, &[256, 128], 30).unwrap();
    assert_eq!(loc.param_count(), 447 * 256 + 257 * 128 + 129 * 30);
    assert_eq!(loc.num_layers(), 3);
    let model = MlpModel::zeros(loc);
    let counted: usize = model.weights().iter().map(|w| w.as_slice().len()).sum();
    assert_eq!(counted as u64, model.param_count());
}

#[test]
fn zero_model_outputs_uniform() {
    let model = MlpModel::zeros(MlpSpec::classifier(5, &[4], 30).unwrap());
    let trace = model.forward(&[1.0, 0.0, 1.0, 1.0, 0.0], Some(7)).unwrap();
    for p in &trace.output {
        assert!((p - 1.0 / 30.0).abs() < 1e-15);
    }
    assert!((trace.loss.unwrap() - 3.4011973816621555).abs() < 1e-12);
    assert_eq!(trace.activations.len(), 1);
}

#[test]
fn forward_matches_hand_computation() {
    let trace = hand_model().forward(&[1.0, 2.0], Some(1)).unwrap();
    assert!((trace.activations[0][0] - 0.8004990217606297).abs() < 1e-14);
    assert!((trace.activations[0][1] - -0.197375320224904).abs() < 1e-14);
    assert!((trace.logits[0] - 0.4057483813108217).abs() < 1e-14);
    assert!((trace.logits[1] - -0.5991866818730818).abs() < 1e-14);
    assert!((trace.output[0] - 0.7320277638253203).abs() < 1e-14);
    assert!((trace.output[1] - 0.2679722361746797).abs() < 1e-14);
    assert!((trace.loss.unwrap() - 1.3168719002008897).abs() < 1e-13);
}

#[test]
fn forward_rejects_bad_input() {
    let model = hand_model();
    assert!(matches!(model.forward(&[1.0], None), Err(Error::Domain(_))));
    assert!(matches!(model.forward(&[1.0, 2.0], Some(2)), Err(Error::Domain(_))));
    assert!(matches!(model.backward(&[1.0, 2.0, 3.0], 0), Err(Error::Domain(_))));
}

#[test]
fn hand_model_gradient_matches_finite_differences() {
    let err = finite_difference_error(&hand_model(), &[1.0, 2.0], 1, 1e-4);
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn relu_gradient_matches_finite_differences() {
    let spec = MlpSpec::new(vec![4, 6, 5, 3], Activation::Relu).unwrap();
    let model = MlpModel::init(spec, 11);
    let err = finite_difference_error(&model, &[0.3, -1.2, 0.7, 1.0], 2, 1e-5);
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn zero_input_bias_gradient_is_uniform_minus_one_hot() {
    let model = MlpModel::zeros(MlpSpec::classifier(3, &[2], 4).unwrap());
    let grads = model.backward(&[0.0, 0.0, 0.0], 1).unwrap();
    let last = grads.last_layer();
    let bias = last.row(last.rows() - 1);
    let expected = [0.25, 0.25 - 1.0, 0.25, 0.25];
    for (b, e) in bias.iter().zip(expected) {
        assert!((b - e).abs() < 1e-15);
    }
}

#[test]
fn gradient_vanishes_at_memorized_point() {
    let spec = MlpSpec::classifier(2, &[3], 3).unwrap();
    let mut model = MlpModel::zeros(spec);
    let last = model.weights_mut().last_mut().unwrap();
    let bias_row = last.rows() - 1;
    last.set(bias_row, 0, 30.0);
    let x = [1.0, 0.0];
    assert!(loss_at(&model, &x, 0) < 1e-8);
    assert!(model.backward(&x, 0).unwrap().max_abs() < 1e-6);
}

#[test]
fn gd_step_examples() {
    let model = MlpModel::init(MlpSpec::classifier(3, &[4], 2).unwrap(), 3);
    let zero = Gradients::zeros_like(&model);
    assert_eq!(model.gd_step(&zero, 0.7).unwrap(), model);

    let as_grad = Gradients::from_layers(model.weights().to_vec());
    let stepped = model.gd_step(&as_grad, 1.0).unwrap();
    assert_eq!(stepped.weights().iter().map(Matrix::max_abs).fold(0.0, f64::max), 0.0);

    // L(w) = (w - 3)^2 at w = 1: dL/dw = -4, lr 0.25 -> w = 2.
    let spec = MlpSpec::classifier(1, &[], 1).unwrap();
    let mut one = MlpModel::zeros(spec);
    one.weights_mut()[0].set(0, 0, 1.0);
    let mut g = Gradients::zeros_like(&one);
    g.layers_mut()[0].set(0, 0, 2.0 * (1.0 - 3.0));
    let next = one.gd_step(&g, 0.25).unwrap();
    assert_eq!(next.weights()[0].get(0, 0), 2.0);

    assert!(model.gd_step(&zero, 0.0).is_err());
    let other = Gradients::zeros_like(&MlpModel::zeros(MlpSpec::classifier(2, &[4], 2).unwrap()));
    assert!(matches!(model.gd_step(&other, 0.1), Err(Error::Domain(_))));
}

#[test]
fn single_record_is_memorized() {
    let model = MlpModel::init(MlpSpec::classifier(4, &[8], 3).unwrap(), 5);
    let x = [1.0, 0.0, 1.0, 1.0];
    let samples = [Sample::new(&x, 2)];
    let cfg = TrainConfig {
        epochs: 500,
        learning_rate: 0.5,
        batch_size: None,
        seed: 1,
    };
    let trained = train(&model, &samples, &cfg).unwrap();
    assert!(weighted_loss(&trained, &samples).unwrap() < 1e-3);
}

fn two_blobs(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = crate::Rng::seed_from_u64(seed);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for i in 0..n {
        let y = i % 2;
        let c = if y == 0 { -1.0 } else { 1.0 };
        xs.push(vec![c + rng.gen_range(-0.4..0.4), c + rng.gen_range(-0.4..0.4)]);
        ys.push(y);
    }
    (xs, ys)
}

#[test]
fn doubled_weights_with_halved_rate_follow_same_trajectory() {
    let (xs, ys) = two_blobs(20, 2);
    let model = MlpModel::init(MlpSpec::classifier(2, &[5], 2).unwrap(), 9);
    let base: Vec<Sample> = xs
        .iter()
        .zip(&ys)
        .enumerate()
        .map(|(i, (x, &y))| Sample::weighted(x, y, 0.5 + (i % 3) as f64))
        .collect();
    let doubled: Vec<Sample> = base
        .iter()
        .map(|s| Sample::weighted(s.features, s.label, 2.0 * s.weight))
        .collect();
    let cfg = TrainConfig {
        epochs: 30,
        learning_rate: 0.2,
        batch_size: None,
        seed: 4,
    };
    let a = train(&model, &base, &cfg).unwrap();
    let b = train(
        &model,
        &doubled,
        &TrainConfig {
            learning_rate: 0.1,
            ..cfg
        },
    )
    .unwrap();
    assert!(a.max_abs_diff(&b) < 1e-12);
}

#[test]
fn separable_blobs_are_learned() {
    let (xs, ys) = two_blobs(100, 8);
    let samples: Vec<Sample> = xs.iter().zip(&ys).map(|(x, &y)| Sample::new(x, y)).collect();
    let model = MlpModel::init(MlpSpec::classifier(2, &[4], 2).unwrap(), 1);
    let cfg = TrainConfig {
        epochs: 50,
        learning_rate: 0.5,
        batch_size: Some(10),
        seed: 3,
    };
    let trained = train(&model, &samples, &cfg).unwrap();
    let acc = test_accuracy(&trained, xs.iter().map(|x| x.as_slice()).zip(ys.iter().copied())).unwrap();
    assert!(acc > 0.95, "accuracy {acc}");
}

#[test]
fn full_batch_loss_decreases_and_training_is_deterministic() {
    let (xs, ys) = two_blobs(30, 5);
    let samples: Vec<Sample> = xs.iter().zip(&ys).map(|(x, &y)| Sample::new(x, y)).collect();
    let model = MlpModel::init(MlpSpec::classifier(2, &[6], 2).unwrap(), 2);
    let cfg = TrainConfig {
        epochs: 20,
        learning_rate: 0.05,
        batch_size: None,
        seed: 0,
    };
    let before = weighted_loss(&model, &samples).unwrap();
    let trained = train(&model, &samples, &cfg).unwrap();
    assert!(weighted_loss(&trained, &samples).unwrap() <= before);

    let mini = TrainConfig {
        batch_size: Some(7),
        ..cfg
    };
    assert_eq!(train(&model, &samples, &mini).unwrap(), train(&model, &samples, &mini).unwrap());
}

#[test]
fn accuracy_edge_cases() {
    let (xs, ys) = two_blobs(10, 1);
    let samples: Vec<Sample> = xs.iter().zip(&ys).map(|(x, &y)| Sample::new(x, y)).collect();
    let model = MlpModel::init(MlpSpec::classifier(2, &[8], 2).unwrap(), 6);
    let cfg = TrainConfig {
        epochs: 400,
        learning_rate: 0.5,
        batch_size: None,
        seed: 0,
    };
    let trained = train(&model, &samples, &cfg).unwrap();
    let recs = || xs.iter().map(|x| x.as_slice()).zip(ys.iter().copied());
    assert_eq!(test_accuracy(&trained, recs()).unwrap(), 1.0);

    // zero model always predicts class 0
    let constant = MlpModel::zeros(MlpSpec::classifier(2, &[3], 4).unwrap());
    let balanced: Vec<(Vec<f64>, usize)> = (0..40).map(|i| (vec![i as f64, 1.0], i % 4)).collect();
    let acc = test_accuracy(&constant, balanced.iter().map(|(x, y)| (x.as_slice(), *y))).unwrap();
    assert_eq!(acc, 0.25);

    let none: [(&[f64], usize); 0] = [];
    assert!(test_accuracy(&constant, none).is_err());
    assert!(train(&constant, &[], &cfg).is_err());
}

fn random_case() -> impl Strategy<Value = (Vec<usize>, u64, bool)> {
    (prop::collection::vec(1usize..=8, 2..=4), any::<u64>(), any::<bool>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn softmax_is_normalized((widths, seed, relu) in random_case()) {
        let act = if relu { Activation::Relu } else { Activation::Tanh };
        let spec = MlpSpec::new(widths.clone(), act).unwrap();
        let model = MlpModel::init(spec, seed);
        let mut rng = crate::Rng::seed_from_u64(seed ^ 1);
        let x: Vec<f64> = (0..widths[0]).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let trace = model.forward(&x, None).unwrap();
        prop_assert!((trace.output.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(trace.output.iter().all(|p| (0.0..=1.0).contains(p)));
        prop_assert_eq!(trace.activations.len(), widths.len() - 2);
    }

    #[test]
    fn backward_matches_finite_differences((widths, seed, _relu) in random_case()) {
        let spec = MlpSpec::new(widths.clone(), Activation::Tanh).unwrap();
        let model = MlpModel::init(spec, seed);
        let mut rng = crate::Rng::seed_from_u64(seed ^ 2);
        let x: Vec<f64> = (0..widths[0]).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y = rng.gen_range(0..*widths.last().unwrap());
        let err = finite_difference_error(&model, &x, y, 1e-4);
        prop_assert!(err < 1e-4, "relative error {}", err);
    }
}

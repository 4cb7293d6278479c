//! Optimizer, trainer, and classifier behavior.

use arbench::models::checkpoint::Checkpoint;
use arbench::models::made::{MadeConfig, MadeModel};
use arbench::models::pixel::{PixelArConfig, PixelArModel};
use arbench::models::{ArModel, ParamSet};
use arbench::tensor::Tensor;
use arbench::training::{
    adam_step, train_classifier, train_mle, AdamState, ClassifierConfig, MleTrainer, OptConfig,
};
use arbench::workbench::gen_manifold2d;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn one_param(values: &[f64]) -> ParamSet {
    let mut p = ParamSet::new();
    p.push("w", Tensor::new(vec![values.len()], values.to_vec()).unwrap());
    p
}

#[test]
fn zero_gradient_leaves_parameters_unchanged() {
    let mut p = one_param(&[1.5, -2.0, 0.0]);
    let before = p.clone();
    let mut st = AdamState::new(&p);
    adam_step(&mut p, &[Tensor::zeros(&[3])], &mut st, &OptConfig::default()).unwrap();
    assert!(p.bitwise_eq(&before));
}

#[test]
fn constant_gradient_step_approaches_learning_rate() {
    let cfg = OptConfig { learning_rate: 0.01, ..OptConfig::default() };
    let mut p = one_param(&[0.0, 0.0]);
    let mut st = AdamState::new(&p);
    let g = Tensor::new(vec![2], vec![3.0, -0.2]).unwrap();
    let mut last = [0.0; 2];
    for _ in 0..2000 {
        let before: Vec<f64> = p.tensors().next().unwrap().data().to_vec();
        adam_step(&mut p, &[g.clone()], &mut st, &cfg).unwrap();
        let after = p.tensors().next().unwrap().data();
        last = [after[0] - before[0], after[1] - before[1]];
    }
    assert!((last[0] + 0.01).abs() < 1e-8 && (last[1] - 0.01).abs() < 1e-8, "{last:?}");
}

#[test]
fn tiny_gradients_are_damped_by_epsilon() {
    let cfg = OptConfig { learning_rate: 0.1, epsilon: 1e-3, ..OptConfig::default() };
    let mut p = one_param(&[0.0]);
    let mut st = AdamState::new(&p);
    let g = 1e-6;
    adam_step(&mut p, &[Tensor::new(vec![1], vec![g]).unwrap()], &mut st, &cfg).unwrap();
    let step = p.tensors().next().unwrap().data()[0].abs();
    assert!(step <= cfg.learning_rate * g / cfg.epsilon);
}

#[test]
fn mismatched_state_is_rejected() {
    let mut p = one_param(&[0.0]);
    let mut st = AdamState::new(&one_param(&[0.0, 1.0]));
    assert!(adam_step(&mut p, &[Tensor::zeros(&[2])], &mut st, &OptConfig::default()).is_err());
}

fn toy_data() -> Tensor {
    gen_manifold2d(500, 3).unwrap().examples
}

#[test]
fn equal_seeds_give_identical_reports() {
    let cfg = OptConfig { max_steps: 60, batch_size: 32, seed: 4, ..OptConfig::default() };
    let data = toy_data();
    let run = || {
        let mut m = MadeModel::new(MadeConfig::toy(2)).unwrap();
        let r = train_mle(&mut m, &data, &cfg).unwrap();
        (r.to_csv(arbench::emit::Provenance::new("t", 4)).render(), m.params().clone())
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a, b);
    assert!(pa.bitwise_eq(&pb));
}

#[test]
fn resume_matches_uninterrupted_run_bitwise() {
    let cfg = OptConfig { max_steps: 30, batch_size: 16, seed: 9, ..OptConfig::default() };
    let data = toy_data();

    let mut straight = MadeModel::new(MadeConfig::toy(5)).unwrap();
    let mut t = MleTrainer::new(&straight, cfg.clone()).unwrap();
    t.run_until(&mut straight, &data, 31).unwrap();
    let want = t.report().steps[30].nll_nats;

    let mut first = MadeModel::new(MadeConfig::toy(5)).unwrap();
    let mut t = MleTrainer::new(&first, cfg.clone()).unwrap();
    t.run_until(&mut first, &data, 30).unwrap();
    let bytes = t.to_checkpoint(&first).to_bytes().unwrap();
    let (mut resumed, mut t2) = MleTrainer::resume(&Checkpoint::from_bytes(&bytes).unwrap(), cfg).unwrap();
    let got = t2.step_once(resumed.as_mut(), &data).unwrap();
    assert_eq!(got.to_bits(), want.to_bits());
    assert!(resumed.params().bitwise_eq(straight.params()));
}

#[test]
fn pixel_model_resume_is_bitwise() {
    let cfg = OptConfig { batch_size: 4, seed: 1, ..OptConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let data = Tensor::new(vec![12, 1, 5, 5], (0..300).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let new = || {
        PixelArModel::new(PixelArConfig { hidden: 4, layers: 2, first_kernel: 3, components: 2, ..PixelArConfig::new(1, 5, 5, 3) })
            .unwrap()
    };
    let mut a = new();
    let mut ta = MleTrainer::new(&a, cfg.clone()).unwrap();
    ta.run_until(&mut a, &data, 6).unwrap();
    let mut b = new();
    let mut tb = MleTrainer::new(&b, cfg.clone()).unwrap();
    tb.run_until(&mut b, &data, 3).unwrap();
    let (mut b2, mut tb2) = MleTrainer::resume(&tb.to_checkpoint(&b), cfg).unwrap();
    tb2.run_until(b2.as_mut(), &data, 6).unwrap();
    assert!(a.params().bitwise_eq(b2.params()));
}

#[test]
fn single_repeated_point_drives_nll_down() {
    let data = Tensor::new(vec![8, 2], [0.4, -1.2].repeat(8)).unwrap();
    let cfg = OptConfig { max_steps: 1500, batch_size: 8, learning_rate: 1e-2, seed: 0, ..OptConfig::default() };
    let mut m = MadeModel::new(MadeConfig::toy(0)).unwrap();
    let r = train_mle(&mut m, &data, &cfg).unwrap();
    let nll: Vec<f64> = r.steps.iter().map(|s| s.nll_nats).collect();
    assert!(nll[nll.len() - 1] < 1e-3, "final {}", nll[nll.len() - 1]);
    // Every batch is the same point, so after a short warmup each step
    // improves on the previous one.
    let warm = 50;
    let rises = nll[warm..].windows(2).filter(|w| w[1] > w[0] + 1e-12).count();
    assert!(rises * 20 < nll.len() - warm, "{rises} increases");
    assert!(nll[warm] > nll[nll.len() - 1]);
}

#[test]
fn training_loss_decreases_on_the_manifold() {
    let cfg = OptConfig { max_steps: 400, batch_size: 100, seed: 2, ..OptConfig::default() };
    let mut m = MadeModel::new(MadeConfig::toy(3)).unwrap();
    let r = train_mle(&mut m, &toy_data(), &cfg).unwrap();
    let (head, tail) = r.head_tail_means().unwrap();
    assert!(tail < head);
}

#[test]
fn invalid_config_rejected() {
    let m = MadeModel::new(MadeConfig::toy(0)).unwrap();
    for cfg in [
        OptConfig { learning_rate: 0.0, ..OptConfig::default() },
        OptConfig { beta1: 1.0, ..OptConfig::default() },
        OptConfig { batch_size: 0, ..OptConfig::default() },
    ] {
        assert!(MleTrainer::new(&m, cfg).is_err());
    }
}

/// `[n, 1, 4, 4]` images whose pixels are drawn around a per-class level.
fn blobs(n: usize, classes: usize, spread: f64, seed: u64) -> (Tensor, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spread).unwrap();
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
    let data = labels
        .iter()
        .flat_map(|&l| {
            let level = if classes == 1 { 0.0 } else { -0.6 + 1.2 * l as f64 / (classes - 1) as f64 };
            (0..16).map(|_| level + noise.sample(&mut rng)).collect::<Vec<_>>()
        })
        .collect();
    (Tensor::new(vec![n, 1, 4, 4], data).unwrap(), labels)
}

fn small_classifier(feature_width: usize) -> ClassifierConfig {
    ClassifierConfig {
        conv_channels: 4,
        feature_width,
        opt: OptConfig { batch_size: 32, max_steps: 300, learning_rate: 1e-2, seed: 1, ..OptConfig::default() },
        ..ClassifierConfig::default()
    }
}

#[test]
fn separable_classes_are_learned() {
    let (x, y) = blobs(1000, 2, 0.1, 0);
    let (clf, rep) = train_classifier(&x, &y, &small_classifier(12)).unwrap();
    assert!(rep.held_out_accuracy > 0.99, "{}", rep.held_out_accuracy);
    assert_eq!(clf.feature_width(), 12);
    assert_eq!(clf.features(&x.rows(0, 7).unwrap()).unwrap().shape(), &[7, 12]);
}

#[test]
fn shuffled_labels_stay_at_chance() {
    let (x, _) = blobs(4000, 1, 0.5, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let y: Vec<usize> = (0..4000).map(|_| rng.random_range(0..10)).collect();
    let (_, rep) = train_classifier(&x, &y, &small_classifier(8)).unwrap();
    assert!((rep.held_out_accuracy - 0.1).abs() < 0.05, "{}", rep.held_out_accuracy);
}

#[test]
fn single_class_rejected() {
    let (x, _) = blobs(20, 1, 0.1, 0);
    assert!(train_classifier(&x, &[0; 20], &small_classifier(4)).is_err());
}

#[test]
fn classifier_checkpoint_round_trip() {
    let (x, y) = blobs(200, 3, 0.1, 4);
    let (clf, _) = train_classifier(&x, &y, &small_classifier(6)).unwrap();
    let back = arbench::training::Classifier::from_checkpoint(
        &Checkpoint::from_bytes(&clf.to_checkpoint().to_bytes().unwrap()).unwrap(),
    )
    .unwrap();
    assert_eq!(back.probabilities(&x).unwrap(), clf.probabilities(&x).unwrap());
}

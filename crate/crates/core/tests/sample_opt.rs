//! Input-space optimization and gradient-field behavior.

use arbench::likelihoods::BinSpec;
use arbench::models::made::{MadeConfig, MadeModel};
use arbench::models::{input_gradient, ArModel};
use arbench::sample_opt::{gradient_field, optimize_samples, probe_start_set, ProbeKind, TrajectoryRecord};
use arbench::tensor::Tensor;
use arbench::training::{train_mle, OptConfig};
use arbench::workbench::gen_manifold2d;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn standard_head() -> MadeModel {
    MadeModel::new(MadeConfig { joint_floor: None, ..MadeConfig::toy(0) }).unwrap()
}

#[test]
fn zero_steps_return_the_start() {
    let m = standard_head();
    let x0 = Tensor::new(vec![2, 2], vec![1.0, -2.0, 0.5, 0.25]).unwrap();
    let rec = optimize_samples(&m, &x0, 0, 0.1, 10).unwrap();
    assert_eq!(rec.entries.len(), 1);
    assert_eq!(rec.entries[0].snapshot, x0);
}

#[test]
fn descent_on_a_standard_head_moves_monotonically_to_the_mode() {
    let m = standard_head();
    let before = m.params().clone();
    let x0 = Tensor::new(vec![1, 2], vec![3.0, 0.0]).unwrap();
    let rec = optimize_samples(&m, &x0, 400, 1e-2, 1).unwrap();
    assert!(m.params().bitwise_eq(&before));
    let xs: Vec<f64> = rec.entries.iter().map(|e| e.snapshot.data()[0]).collect();
    let nll: Vec<f64> = rec.entries.iter().map(|e| e.nll_bits_per_dim).collect();
    assert!(xs.windows(2).all(|w| w[1] < w[0] && w[1] > 0.0));
    assert!(nll.windows(2).all(|w| w[1] < w[0]));
    // Far from the edges the bin-integrated slope is close to -x, so
    // each step shrinks x by roughly a factor (1 - lr).
    assert!(xs[400] < 3.0 * (1.0 - 1e-2f64).powi(400) * 1.2, "{}", xs[400]);
    // The held coordinate already sits at the mode.
    assert!(rec.entries.iter().all(|e| e.snapshot.data()[1].abs() < 1e-12));
}

#[test]
fn step_matches_the_input_gradient() {
    let m = standard_head();
    let x0 = Tensor::new(vec![1, 2], vec![1.3, -0.7]).unwrap();
    let (_, g) = input_gradient(&m, &x0).unwrap();
    let rec = optimize_samples(&m, &x0, 1, 0.05, 1).unwrap();
    for i in 0..2 {
        let moved = rec.entries[1].snapshot.data()[i] - x0.data()[i];
        assert!((moved - 0.05 * g.data()[i]).abs() < 1e-15);
    }
}

#[test]
fn iterates_stay_inside_the_bin_range() {
    let m = standard_head();
    let x0 = Tensor::new(vec![1, 2], vec![4.99, -4.99]).unwrap();
    let rec = optimize_samples(&m, &x0, 5, 50.0, 1).unwrap();
    for e in &rec.entries {
        assert!(e.snapshot.data().iter().all(|v| (-5.0..=5.0).contains(v)));
    }
}

#[test]
fn floor_regions_do_not_move() {
    let data = gen_manifold2d(2000, 1).unwrap().examples;
    let mut m = MadeModel::new(MadeConfig::toy(1)).unwrap();
    let cfg = OptConfig { max_steps: 3000, batch_size: 100, seed: 1, ..OptConfig::default() };
    train_mle(&mut m, &data, &cfg).unwrap();
    let field = gradient_field(&m, (-3.0, 3.0), (-3.0, 3.0), (40, 40)).unwrap();
    let (x1s, x2s) = (field.x1_values(), field.x2_values());
    let flat: Vec<(f64, f64)> = (0..40)
        .flat_map(|r| (0..40).map(move |c| (r, c)))
        .filter(|&(r, c)| field.at(r, c) == 0.0)
        .map(|(r, c)| (x1s[c], x2s[r]))
        .take(10)
        .collect();
    assert!(!flat.is_empty(), "no floor cells after training");
    let x0 = Tensor::new(vec![flat.len(), 2], flat.iter().flat_map(|&(a, b)| [a, b]).collect()).unwrap();
    let rec = optimize_samples(&m, &x0, 20, 1e-2, 1).unwrap();
    for w in rec.entries.windows(2) {
        let step: f64 = w[1]
            .snapshot
            .data()
            .iter()
            .zip(w[0].snapshot.data())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(step < 1e-6);
    }
}

#[test]
fn untrained_field_is_nonzero_almost_everywhere() {
    let f = gradient_field(&standard_head(), (-3.0, 3.0), (-3.0, 3.0), (100, 100)).unwrap();
    let above = 1.0 - f.near_zero_fraction(1e-3);
    assert!(above > 0.99, "{above}");
    assert!(f.norms.iter().all(|&n| n >= 0.0));
}

#[test]
fn field_of_a_mirror_symmetric_model_is_symmetric() {
    let mut m = MadeModel::new(MadeConfig { zero_init_output: false, joint_floor: None, ..MadeConfig::toy(6) }).unwrap();
    // Zeroing every location output leaves μ = 0 for both conditionals, so
    // the density is even in x₂ while σ₂ still depends on x₁.
    let n = m.params().len();
    for (i, t) in m.params_mut().tensors_mut().enumerate() {
        if i == n - 2 {
            let cols = t.shape()[1];
            for (k, v) in t.data_mut().iter_mut().enumerate() {
                if k % cols < 2 {
                    *v = 0.0;
                }
            }
        }
        if i == n - 1 {
            t.data_mut()[..2].fill(0.0);
        }
    }
    let f = gradient_field(&m, (-3.0, 3.0), (-3.0, 3.0), (30, 31)).unwrap();
    for r in 0..31 {
        for c in 0..30 {
            assert!((f.at(r, c) - f.at(30 - r, c)).abs() < 1e-9);
        }
    }
    // σ₂ varies with x₁, so the fixture is not trivially constant.
    assert!((f.at(3, 0) - f.at(3, 29)).abs() > 1e-6);
}

#[test]
fn coarse_resolution_rejected() {
    assert!(gradient_field(&standard_head(), (-1.0, 1.0), (-1.0, 1.0), (1, 10)).is_err());
}

#[test]
fn constant_probes() {
    let bins = BinSpec::image();
    let shape = [1, 4, 4];
    let b = probe_start_set(ProbeKind::Black, 3, &shape, &bins, 0, None).unwrap();
    let g = probe_start_set(ProbeKind::Gray, 3, &shape, &bins, 0, None).unwrap();
    let w = probe_start_set(ProbeKind::White, 3, &shape, &bins, 0, None).unwrap();
    assert!(b.data().iter().all(|&v| v == -1.0));
    assert!(w.data().iter().all(|&v| v == 1.0));
    assert!(g.data().iter().all(|&v| v == bins.center(128)));
    assert_eq!(b.shape(), &[3, 1, 4, 4]);
    assert!("sepia".parse::<ProbeKind>().is_err());
    assert!(probe_start_set(ProbeKind::Digits, 3, &shape, &bins, 0, None).is_err());
}

#[test]
fn noise_probes_are_uniform_and_reproducible() {
    let bins = BinSpec::image();
    let a = probe_start_set(ProbeKind::Noise, 40, &[1, 14, 14], &bins, 12, None).unwrap();
    assert_eq!(a, probe_start_set(ProbeKind::Noise, 40, &[1, 14, 14], &bins, 12, None).unwrap());
    let mut counts = vec![0.0f64; 256];
    for &v in a.data() {
        counts[bins.index(v)] += 1.0;
    }
    let e = a.len() as f64 / 256.0;
    let stat: f64 = counts.iter().map(|c| (c - e).powi(2) / e).sum();
    assert!(stat < ChiSquared::new(255.0).unwrap().inverse_cdf(0.99), "{stat}");
}

#[test]
fn trajectory_csv_has_one_row_per_example_and_log() {
    let m = standard_head();
    let x0 = Tensor::new(vec![3, 2], vec![1.0, 1.0, -2.0, 0.5, 0.0, 0.0]).unwrap();
    let rec: TrajectoryRecord = optimize_samples(&m, &x0, 10, 1e-2, 4).unwrap();
    let iters: Vec<usize> = rec.entries.iter().map(|e| e.iteration).collect();
    assert_eq!(iters, [0, 4, 8, 10]);
    let csv = rec.to_csv(arbench::emit::Provenance::new("optimize", 0));
    assert_eq!(csv.rows.len(), 12);
    assert!(rec.entries.iter().all(|e| e.nll_bits_per_dim.is_finite()));
}

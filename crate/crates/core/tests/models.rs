//! Masking, normalization, and sampling checks for both AR models.

use arbench::likelihoods::{discretized_gaussian_logpmf, BinSpec, GaussianParams};
use arbench::models::made::{build_made_masks, MadeConfig, MadeModel};
use arbench::models::pixel::{pixel_receptive_field_check, MaskType, PixelArConfig, PixelArModel};
use arbench::models::{logprob, ArModel};
use arbench::tensor::Tensor;
use arbench::training::{train_mle, OptConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn five_bins() -> BinSpec {
    BinSpec::new(-1.0, 1.0, 5).unwrap()
}

fn small_made(ordering: Vec<usize>, seed: u64, zero_init_output: bool) -> MadeModel {
    MadeModel::new(MadeConfig {
        dims: 2,
        hidden: vec![16, 16],
        ordering: Some(ordering),
        bins: five_bins(),
        seed,
        zero_init_output,
        joint_floor: None,
    })
    .unwrap()
}

/// All 25 atoms of the 5-bin square, row-major in `(x0, x1)`.
fn atoms() -> Tensor {
    let c = five_bins().centers();
    let data = c.iter().flat_map(|&a| c.iter().flat_map(move |&b| [a, b])).collect();
    Tensor::new(vec![25, 2], data).unwrap()
}

fn atom_probs(m: &dyn ArModel) -> Vec<f64> {
    logprob(m, &atoms()).unwrap().into_iter().map(f64::exp).collect()
}

fn atom_index(x: &[f64]) -> usize {
    let b = five_bins();
    b.index(x[0]) * 5 + b.index(x[1])
}

#[test]
fn enumeration_over_25_atoms_sums_to_one() {
    for seed in 0..10 {
        let ordering = if seed % 2 == 0 { vec![0, 1] } else { vec![1, 0] };
        let total: f64 = atom_probs(&small_made(ordering, seed, false)).iter().sum();
        assert!((total - 1.0).abs() < 1e-6, "seed {seed}: {total}");
    }
}

#[test]
fn logprob_never_positive() {
    let m = small_made(vec![0, 1], 3, false);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::new(vec![200, 2], (0..400).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
    assert!(logprob(&m, &x).unwrap().iter().all(|&l| l <= 0.0));
}

#[test]
fn zero_init_logprob_matches_closed_form() {
    let m = MadeModel::new(MadeConfig { joint_floor: None, ..MadeConfig::toy(5) }).unwrap();
    let bins = BinSpec::toy();
    let x = Tensor::new(vec![3, 2], vec![0.0, 0.2, -1.4, 2.6, 4.8, -5.0]).unwrap();
    let lp = logprob(&m, &x).unwrap();
    let std = GaussianParams::new(0.0, 0.0);
    for (r, l) in lp.iter().enumerate() {
        let want: f64 = x.data()[2 * r..2 * r + 2].iter().map(|&v| discretized_gaussian_logpmf(v, std, &bins)).sum();
        assert!((l - want).abs() < 1e-12);
    }
}

#[test]
fn sampling_matches_density_on_25_atoms() {
    let m = small_made(vec![1, 0], 11, false);
    let p = atom_probs(&m);
    let n = 100_000;
    let s = m.sample(n, 99).unwrap();
    let mut counts = [0usize; 25];
    for r in 0..n {
        counts[atom_index(&s.data()[2 * r..2 * r + 2])] += 1;
    }
    let tv: f64 = 0.5 * counts.iter().zip(&p).map(|(&c, &q)| (c as f64 / n as f64 - q).abs()).sum::<f64>();
    assert!(tv < 0.02, "total variation {tv}");
    assert_eq!(s, m.sample(n, 99).unwrap());
}

#[test]
fn zero_init_samples_pass_chi_square() {
    let m = small_made(vec![0, 1], 2, true);
    let bins = five_bins();
    let std = GaussianParams::new(0.0, 0.0);
    let expected: Vec<f64> = bins.centers().iter().map(|&c| discretized_gaussian_logpmf(c, std, &bins).exp()).collect();
    let n = 10_000;
    let s = m.sample(n, 5).unwrap();
    let critical = ChiSquared::new(4.0).unwrap().inverse_cdf(0.99);
    for dim in 0..2 {
        let mut counts = [0.0f64; 5];
        for r in 0..n {
            counts[bins.index(s.data()[2 * r + dim])] += 1.0;
        }
        let stat: f64 = counts
            .iter()
            .zip(&expected)
            .map(|(o, p)| (o - n as f64 * p).powi(2) / (n as f64 * p))
            .sum();
        assert!(stat < critical, "dim {dim}: {stat} >= {critical}");
    }
}

#[test]
fn tiny_sigma_samples_sit_on_mu() {
    let mut m = MadeModel::new(MadeConfig::toy(1)).unwrap();
    let c = BinSpec::toy().center(37);
    let names: Vec<String> = m.params().names().map(String::from).collect();
    let last_bias = names.iter().rposition(|n| n.ends_with(".b")).unwrap();
    let b = m.params_mut().tensors_mut().nth(last_bias).unwrap();
    b.data_mut().copy_from_slice(&[c, c, -20.0, -20.0]);
    let s = m.sample(500, 3).unwrap();
    assert!(s.data().iter().all(|&v| v == c));
}

/// `reach[j][i]`: some path connects input `j` to output `i`.
fn reach(masks: &[Tensor], d: usize) -> Vec<Vec<bool>> {
    let mut cur: Vec<Vec<bool>> = (0..d).map(|j| (0..d).map(|k| j == k).collect()).collect();
    for m in masks {
        let (rows, cols) = (m.shape()[0], m.shape()[1]);
        cur = cur
            .iter()
            .map(|r| (0..cols).map(|b| (0..rows).any(|a| r[a] && m.data()[a * cols + b] != 0.0)).collect())
            .collect();
    }
    cur.iter().map(|r| (0..d).map(|i| (0..r.len() / d).any(|g| r[g * d + i])).collect()).collect()
}

#[test]
fn made_reachability_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for seed in 0..25u64 {
        let mut ordering = vec![0, 1, 2];
        for i in (1..3).rev() {
            ordering.swap(i, rng.random_range(0..=i));
        }
        let masks = build_made_masks(&[3, 8, 8, 6], &ordering, seed).unwrap();
        let r = reach(&masks, 3);
        let rank = |v: usize| ordering.iter().position(|&o| o == v).unwrap();
        for j in 0..3 {
            for i in 0..3 {
                if rank(j) >= rank(i) {
                    assert!(!r[j][i], "seed {seed} ordering {ordering:?}: input {j} reaches output {i}");
                }
            }
        }
    }
}

#[test]
fn made_ordering_controls_fan_in() {
    for (ordering, free) in [(vec![0, 1], 0), (vec![1, 0], 1)] {
        let masks = build_made_masks(&[2, 16, 4], &ordering, 0).unwrap();
        let r = reach(&masks, 2);
        assert!(!r[0][free] && !r[1][free]);
        assert!(r[free][1 - free]);
    }
}

#[test]
fn made_invariance_to_later_inputs_is_bitwise() {
    let m = MadeModel::new(MadeConfig {
        dims: 4,
        hidden: vec![24, 24],
        ordering: Some(vec![2, 0, 3, 1]),
        bins: BinSpec::toy(),
        seed: 4,
        zero_init_output: false,
        joint_floor: None,
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let x0: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
        let j = rng.random_range(0..4);
        let mut x1 = x0.clone();
        x1[j] += rng.random_range(0.5..2.0);
        let c0 = m.conditionals(&Tensor::new(vec![1, 4], x0).unwrap()).unwrap();
        let c1 = m.conditionals(&Tensor::new(vec![1, 4], x1).unwrap()).unwrap();
        let rank = |v: usize| m.ordering().iter().position(|&o| o == v).unwrap();
        for i in 0..4 {
            if rank(j) >= rank(i) {
                for k in 0..2 {
                    assert_eq!(c0.data()[i * 2 + k].to_bits(), c1.data()[i * 2 + k].to_bits());
                }
            }
        }
    }
}

#[test]
fn orderings_agree_on_a_four_point_dataset() {
    // Empirical law: (-1,-1) twice, (-1,1), (1,1).
    let data = Tensor::new(vec![4, 2], vec![-1.0, -1.0, -1.0, -1.0, -1.0, 1.0, 1.0, 1.0]).unwrap();
    let cfg = OptConfig { learning_rate: 1e-2, batch_size: 64, max_steps: 20_000, seed: 1, ..OptConfig::default() };
    let mut fitted = Vec::new();
    for ordering in [vec![0, 1], vec![1, 0]] {
        let mut m = small_made(ordering, 21, true);
        train_mle(&mut m, &data, &cfg).unwrap();
        fitted.push(atom_probs(&m));
    }
    let target = [(0, 0.5), (4, 0.25), (24, 0.25)];
    for (idx, want) in target {
        for p in &fitted {
            assert!((p[idx] - want).abs() < 0.05, "atom {idx}: {} vs {want}", p[idx]);
        }
        assert!((fitted[0][idx] - fitted[1][idx]).abs() < 0.05);
    }
}

fn pixel(channels: usize, first_mask: MaskType, seed: u64) -> PixelArModel {
    PixelArModel::new(PixelArConfig {
        hidden: 8,
        layers: 3,
        first_kernel: 5,
        components: 2,
        first_mask,
        ..PixelArConfig::new(channels, 8, 7, seed)
    })
    .unwrap()
}

#[test]
fn pixel_perturbation_check_at_20_positions() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for channels in [1, 3] {
        let m = pixel(channels, MaskType::A, 2);
        assert!(pixel_receptive_field_check(&m, (0, 0), 0).unwrap());
        for i in 0..20 {
            let pos = (rng.random_range(0..8), rng.random_range(0..7));
            assert!(pixel_receptive_field_check(&m, pos, i).unwrap(), "{channels} channels at {pos:?}");
        }
    }
}

#[test]
fn unmasked_pixel_model_fails_the_check() {
    let m = pixel(1, MaskType::None, 2);
    assert!(!pixel_receptive_field_check(&m, (3, 3), 0).unwrap());
}

#[test]
fn pixel_model_normalizes_per_pixel() {
    // With a single pixel every conditional is unconditional, so the full
    // pmf over 256 levels must sum to one.
    let m = PixelArModel::new(PixelArConfig { hidden: 4, layers: 2, first_kernel: 3, components: 3, ..PixelArConfig::new(1, 1, 1, 9) })
        .unwrap();
    let levels = BinSpec::image().centers();
    let x = Tensor::new(vec![256, 1, 1, 1], levels).unwrap();
    let total: f64 = logprob(&m, &x).unwrap().iter().map(|l| l.exp()).sum();
    assert!((total - 1.0).abs() < 1e-6, "{total}");
}

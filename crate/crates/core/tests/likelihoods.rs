//! Normalization, monotonicity, equivariance, and derivative checks for the
//! discretized heads.

use arbench::likelihoods::{
    bits_per_dim, discretized_gaussian_logpmf, discretized_logistic_mixture_logpmf, gaussian_bin, logistic_mixture_bin,
    BinSpec, GaussianParams, LogisticComponent, LogisticMixtureParams,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_mixture(rng: &mut ChaCha8Rng) -> LogisticMixtureParams {
    let k = rng.random_range(1..=5);
    LogisticMixtureParams::new(
        (0..k)
            .map(|_| LogisticComponent {
                logit_weight: rng.random_range(-3.0..3.0),
                mu: rng.random_range(-1.2..1.2),
                log_scale: rng.random_range(-5.0..0.5),
            })
            .collect(),
    )
    .unwrap()
}

#[test]
fn gaussian_head_normalizes_over_100_draws() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for bins in [BinSpec::toy(), BinSpec::image(), BinSpec::new(-1.0, 1.0, 5).unwrap()] {
        for _ in 0..100 {
            let p = GaussianParams::new(rng.random_range(-6.0..6.0), rng.random_range(-4.0..2.0));
            let total: f64 = bins.centers().iter().map(|&c| discretized_gaussian_logpmf(c, p, &bins).exp()).sum();
            // Mass below the floor is dropped, so allow for floored bins.
            let floored = bins.centers().iter().filter(|&&c| gaussian_bin(c, p, &bins).clamped).count() as f64;
            assert!((total - 1.0).abs() < 1e-6 + floored * bins.floor().exp(), "{p:?}: {total}");
        }
    }
}

#[test]
fn mixture_head_normalizes_over_100_draws() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let bins = BinSpec::image();
    for _ in 0..100 {
        let p = random_mixture(&mut rng);
        let total: f64 = bins
            .centers()
            .iter()
            .map(|&c| discretized_logistic_mixture_logpmf(c, &p, &bins).exp())
            .sum();
        assert!((total - 1.0).abs() < 1e-6, "{p:?}: {total}");
    }
}

#[test]
fn cumulative_mass_is_nondecreasing() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let bins = BinSpec::image();
    for _ in 0..20 {
        let g = GaussianParams::new(rng.random_range(-1.0..1.0), rng.random_range(-3.0..0.0));
        let m = random_mixture(&mut rng);
        let (mut cg, mut cm) = (0.0f64, 0.0f64);
        for c in bins.centers() {
            let (ng, nm) = (
                cg + discretized_gaussian_logpmf(c, g, &bins).exp(),
                cm + discretized_logistic_mixture_logpmf(c, &m, &bins).exp(),
            );
            assert!(ng >= cg && nm >= cm);
            (cg, cm) = (ng, nm);
        }
        assert!(cg <= 1.0 + 1e-9 && cm <= 1.0 + 1e-9);
    }
}

#[test]
fn narrow_gaussian_concentrates_on_its_bin() {
    let bins = BinSpec::toy();
    let c = bins.center(30);
    let p = GaussianParams::new(c, (bins.width() / 100.0).ln());
    assert!(discretized_gaussian_logpmf(c, p, &bins).exp() > 0.999);
    for i in [0, 10, 29, 31, 50] {
        assert_eq!(discretized_gaussian_logpmf(bins.center(i), p, &bins), bins.floor());
    }
}

#[test]
fn edge_bins_absorb_tails() {
    let bins = BinSpec::new(-1.0, 1.0, 2).unwrap();
    let p = GaussianParams::new(0.0, 0.0);
    for x in [-1.0, 1.0] {
        assert!((discretized_gaussian_logpmf(x, p, &bins) + std::f64::consts::LN_2).abs() < 1e-15);
    }
}

#[test]
fn bits_per_dim_examples() {
    assert_eq!(bits_per_dim(7.0 * std::f64::consts::LN_2, 7).unwrap(), 1.0);
    assert!((bits_per_dim(10.0 * 256f64.ln(), 10).unwrap() - 8.0).abs() < 1e-12);
    assert_eq!(bits_per_dim(0.0, 3).unwrap(), 0.0);
    assert!(bits_per_dim(1.0, 0).is_err());
}

fn central(f: impl Fn(f64) -> f64, at: f64) -> f64 {
    let h = 1e-5;
    (f(at + h) - f(at - h)) / (2.0 * h)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs() + 1e-12)
}

#[test]
fn gaussian_partials_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let bins = BinSpec::toy();
    for _ in 0..50 {
        let x = bins.center(rng.random_range(1..50)) + rng.random_range(-0.05..0.05);
        let mu = rng.random_range(-2.0..2.0);
        let ls = rng.random_range(-0.5..0.7);
        let e = gaussian_bin(x, GaussianParams::new(mu, ls), &bins);
        if e.clamped {
            continue;
        }
        let v = |x: f64, mu: f64, ls: f64| gaussian_bin(x, GaussianParams::new(mu, ls), &bins).value;
        assert!(rel(e.d_x, central(|t| v(t, mu, ls), x)) < 1e-4);
        assert!(rel(e.d_mu, central(|t| v(x, t, ls), mu)) < 1e-4);
        assert!(rel(e.d_log_scale, central(|t| v(x, mu, t), ls)) < 1e-4);
    }
}

#[test]
fn mixture_partials_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let bins = BinSpec::image();
    for _ in 0..30 {
        let p = random_mixture(&mut rng);
        let comps: Vec<LogisticComponent> = p.components().to_vec();
        let x = bins.center(rng.random_range(1..255));
        let e = logistic_mixture_bin(x, &p, &bins, None);
        if e.clamped {
            continue;
        }
        let at = |cs: Vec<LogisticComponent>, x: f64| {
            logistic_mixture_bin(x, &LogisticMixtureParams::new(cs).unwrap(), &bins, None).value
        };
        assert!(rel(e.d_x, central(|t| at(comps.clone(), t), x)) < 1e-4);
        for j in 0..comps.len() {
            let with = |field: u8, v: f64| {
                let mut cs = comps.clone();
                match field {
                    0 => cs[j].logit_weight = v,
                    1 => cs[j].mu = v,
                    _ => cs[j].log_scale = v,
                }
                at(cs, x)
            };
            for (field, analytic, base) in [
                (0, e.d_logit[j], comps[j].logit_weight),
                (1, e.d_mu[j], comps[j].mu),
                (2, e.d_log_scale[j], comps[j].log_scale),
            ] {
                let numeric = central(|v| with(field, v), base);
                // Components with negligible responsibility have gradients
                // below finite-difference resolution.
                if analytic.abs() < 1e-7 && numeric.abs() < 1e-6 {
                    continue;
                }
                assert!(rel(analytic, numeric) < 1e-4, "component {j} field {field}: {analytic} vs {numeric}");
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    /// Shifting both the location and the evaluation point by one bin leaves
    /// interior masses unchanged.
    #[test]
    fn translation_by_one_bin(i in 1usize..48, mu in -3.0f64..3.0, ls in -1.5f64..0.5) {
        let bins = BinSpec::toy();
        let d = bins.width();
        let a = discretized_gaussian_logpmf(bins.center(i), GaussianParams::new(mu, ls), &bins).exp();
        let b = discretized_gaussian_logpmf(bins.center(i + 1), GaussianParams::new(mu + d, ls), &bins).exp();
        prop_assert!((a - b).abs() < 1e-9);
        let m = LogisticMixtureParams::single(mu / 5.0, ls - 2.0);
        let ms = LogisticMixtureParams::single(mu / 5.0 + BinSpec::image().width(), ls - 2.0);
        let img = BinSpec::image();
        let j = i * 5;
        let a = discretized_logistic_mixture_logpmf(img.center(j), &m, &img).exp();
        let b = discretized_logistic_mixture_logpmf(img.center(j + 1), &ms, &img).exp();
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn mixture_weights_sum_to_one(seed in 0u64..100_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = random_mixture(&mut rng).weights();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn duplicate_components_ignore_the_split(w in 0.01f64..0.99, mu in -0.8f64..0.8, ls in -4.0f64..-1.0, i in 0usize..256) {
        let bins = BinSpec::image();
        let one = LogisticMixtureParams::single(mu, ls);
        let two = LogisticMixtureParams::new(vec![
            LogisticComponent { logit_weight: w.ln(), mu, log_scale: ls },
            LogisticComponent { logit_weight: (1.0 - w).ln(), mu, log_scale: ls },
        ]).unwrap();
        let x = bins.center(i);
        let (a, b) = (discretized_logistic_mixture_logpmf(x, &one, &bins), discretized_logistic_mixture_logpmf(x, &two, &bins));
        prop_assert!((a - b).abs() < 1e-12 || (a == bins.floor() && b == bins.floor()));
    }

    #[test]
    fn log_mass_never_positive(x in -6.0f64..6.0, mu in -6.0f64..6.0, ls in -6.0f64..3.0) {
        let bins = BinSpec::toy();
        prop_assert!(discretized_gaussian_logpmf(x, GaussianParams::new(mu, ls), &bins) <= 0.0);
    }
}

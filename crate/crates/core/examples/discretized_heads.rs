//! Evaluates both discretized likelihood heads on the 256-level pixel grid:
//! total mass, a few bin probabilities, and bits/dim of a constant image.
//!
//! ```text
//! cargo run --example discretized_heads
//! ```

use arbench::likelihoods::{
    bits_per_dim, discretized_gaussian_logpmf, discretized_logistic_mixture_logpmf, BinSpec, GaussianParams,
    LogisticComponent, LogisticMixtureParams,
};

fn main() -> arbench::Result<()> {
    let bins = BinSpec::image();
    let gauss = GaussianParams::new(0.1, -2.0);
    let mix = LogisticMixtureParams::new(vec![
        LogisticComponent { logit_weight: 0.0, mu: -0.5, log_scale: -3.0 },
        LogisticComponent { logit_weight: 1.0, mu: 0.6, log_scale: -2.5 },
    ])?;

    let g_total: f64 = bins.centers().iter().map(|&c| discretized_gaussian_logpmf(c, gauss, &bins).exp()).sum();
    let m_total: f64 = bins.centers().iter().map(|&c| discretized_logistic_mixture_logpmf(c, &mix, &bins).exp()).sum();
    println!("total mass: gaussian {g_total:.12}, logistic mixture {m_total:.12}");

    for x in [-1.0, -0.5, 0.1, 0.6, 1.0] {
        let x = bins.snap(x);
        println!(
            "x = {x:+.4}  log p gaussian {:>9.4}  log p mixture {:>9.4}",
            discretized_gaussian_logpmf(x, gauss, &bins),
            discretized_logistic_mixture_logpmf(x, &mix, &bins)
        );
    }

    // A 14×14 image of one repeated level under the mixture head.
    let nll = -196.0 * discretized_logistic_mixture_logpmf(bins.snap(0.6), &mix, &bins);
    println!("constant image at the dominant mode: {:.3} bits/dim", bits_per_dim(nll, 196)?);
    Ok(())
}

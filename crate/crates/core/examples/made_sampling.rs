//! Fits MADE to a four-point distribution on a 5-bin grid, then compares
//! the model's exact atom probabilities with sample frequencies.
//!
//! ```text
//! cargo run --release --example made_sampling -- [steps]
//! ```

use arbench::likelihoods::BinSpec;
use arbench::models::{logprob, ArModel, MadeConfig, MadeModel};
use arbench::training::{train_mle, OptConfig};
use arbench::Tensor;

fn main() -> arbench::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5000);
    let bins = BinSpec::new(-1.0, 1.0, 5)?;
    let data = Tensor::new(vec![4, 2], vec![-1.0, -1.0, -1.0, -1.0, -1.0, 1.0, 1.0, 1.0])?;
    let mut model = MadeModel::new(MadeConfig {
        dims: 2,
        hidden: vec![16, 16],
        ordering: Some(vec![1, 0]),
        bins,
        seed: 21,
        zero_init_output: true,
        joint_floor: None,
    })?;
    let cfg = OptConfig { learning_rate: 1e-2, batch_size: 64, max_steps: steps, seed: 1, ..OptConfig::default() };
    let report = train_mle(&mut model, &data, &cfg)?;
    println!("final NLL {:.4} nats", report.steps.last().map_or(f64::NAN, |s| s.nll_nats));

    let c = bins.centers();
    let atoms = Tensor::new(vec![25, 2], c.iter().flat_map(|&a| c.iter().flat_map(move |&b| [a, b])).collect())?;
    let probs: Vec<f64> = logprob(&model, &atoms)?.into_iter().map(f64::exp).collect();
    let n = 50_000;
    let samples = model.sample(n, 4)?;
    let mut freq = [0.0; 25];
    for p in samples.data().chunks(2) {
        freq[bins.index(p[0]) * 5 + bins.index(p[1])] += 1.0 / n as f64;
    }
    println!("{:>14} {:>8} {:>8}", "atom", "p", "freq");
    for (i, (p, f)) in probs.iter().zip(freq).enumerate() {
        if *p > 0.01 || f > 0.01 {
            println!("({:+.1}, {:+.1}) {p:>8.4} {f:>8.4}", c[i / 5], c[i % 5]);
        }
    }
    println!("total mass {:.9}", probs.iter().sum::<f64>());
    Ok(())
}

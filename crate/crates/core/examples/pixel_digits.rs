//! Trains the masked-convolution pixel model on rendered 14×14 digits and
//! reports bits/dim on digits, outline shapes, noise, and constant images.
//!
//! ```text
//! cargo run --release --example pixel_digits -- [steps] [batch] [learning_rate]
//! ```

use std::time::Instant;

use arbench::models::{bits_per_dim, PixelArConfig, PixelArModel};
use arbench::training::{MleTrainer, OptConfig};
use arbench::workbench::{make_probe_images, synthetic_digits, synthetic_shapes, ProbeImageKind};

fn summary(name: &str, v: &[f64]) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(*x), b.max(*x)));
    println!("{name:>10}: mean {mean:.3} sd {sd:.3} range [{lo:.3}, {hi:.3}] bits/dim");
}

fn main() -> arbench::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1500);
    let batch: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(16);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let seed = 3;

    let train = synthetic_digits(4000, seed, true)?;
    let test = synthetic_digits(500, seed + 1, true)?;
    let mut model = PixelArModel::new(PixelArConfig::new(1, 14, 14, seed))?;
    let mut trainer = MleTrainer::new(
        &model,
        OptConfig {
            batch_size: batch,
            learning_rate: lr,
            max_steps: steps,
            seed,
            ..OptConfig::default()
        },
    )?;
    let t0 = Instant::now();
    for stop in (1..=10).map(|i| i * steps / 10) {
        trainer.run_until(&mut model, &train.examples, stop)?;
        println!(
            "step {stop:>6}: {:.3} bits/dim ({:.1}s)",
            trainer.report().tail_mean(steps / 10).unwrap(),
            t0.elapsed().as_secs_f64()
        );
    }
    summary("train", &bits_per_dim(&model, &train.head(500)?.examples)?);
    summary("test", &bits_per_dim(&model, &test.examples)?);
    summary("shapes", &bits_per_dim(&model, &synthetic_shapes(200, 9, true)?.examples)?);
    for kind in [ProbeImageKind::Noise, ProbeImageKind::Black, ProbeImageKind::White] {
        let p = make_probe_images(kind, 100, [1, 14, 14], 5)?;
        summary(&p.name, &bits_per_dim(&model, &p.examples)?);
    }
    Ok(())
}

//! Trains a MADE model on points with `x1 = 0, x2 ~ N(0,1)` and maps the
//! norm of the input gradient of `log p` over `[-3, 3]²`.
//!
//! ```text
//! cargo run --example manifold_heatmap -- [steps] [out_dir] [learning_rate]
//! ```

use std::path::PathBuf;

use arbench::emit::Provenance;
use arbench::likelihoods::{discretized_gaussian_entropy, BinSpec, GaussianParams};
use arbench::models::{ArModel, MadeConfig, MadeModel};
use arbench::sample_opt::gradient_field;
use arbench::training::{MleTrainer, OptConfig};
use arbench::workbench::gen_manifold2d;

fn main() -> arbench::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(6000);
    let out = PathBuf::from(args.get(2).map_or("out/manifold", String::as_str));
    let seed = 7;
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1e-3);

    let data = gen_manifold2d(10_000, seed)?;
    let mut model = MadeModel::new(MadeConfig::toy(seed))?;
    let cfg = OptConfig {
        max_steps: steps,
        learning_rate: lr,
        seed,
        ..OptConfig::default()
    };
    let mut trainer = MleTrainer::new(&model, cfg)?;

    let optimum = discretized_gaussian_entropy(GaussianParams::new(0.0, 0.0), &BinSpec::toy())
        / (2.0 * std::f64::consts::LN_2);
    println!("analytic optimum: {optimum:.4} bits/dim");

    for (i, stop) in [steps / 3, 2 * steps / 3, steps].into_iter().enumerate() {
        trainer.run_until(&mut model, &data.examples, stop)?;
        let field = gradient_field(&model, (-3.0, 3.0), (-3.0, 3.0), (100, 100))?;
        let tail = trainer.report().tail_mean(200).unwrap_or(f64::NAN);
        let cond = model.conditionals(&arbench::Tensor::new(vec![1, 2], vec![0.0, 0.0])?)?;
        println!(
            "step {stop:>6}: train {tail:.4} bits/dim, sigma1 {:.4}, near-zero {:.3}, bands {:?}",
            cond.data()[1].exp(),
            field.near_zero_fraction(1e-3),
            field.column_bands(1e-3)
        );
        if i == 2 {
            let prov = Provenance::new("heatmap", seed).with("steps", stop);
            field.to_csv(prov.clone()).save(&out.join("field.csv"))?;
            arbench::emit::write_text(&out.join("field.svg"), &field.to_svg("|grad log p|, log10")?)?;
            trainer.report().to_csv(prov).save(&out.join("train.csv"))?;
        }
    }
    println!("wrote {}", out.display());
    Ok(())
}

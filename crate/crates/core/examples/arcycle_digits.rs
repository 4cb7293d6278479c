//! Translates tinted digits to grayscale digits and back, judged only by two
//! frozen pixel models, and prints cycle loss against translated-image NLL.
//!
//! ```text
//! cargo run --release --example arcycle_digits -- [ablation] [steps] [out_dir] [learning_rate] [hidden]
//! ```
//! Trained density models are cached in `out_dir` and reused.

use std::path::{Path, PathBuf};
use std::time::Instant;

use arbench::arcycle::{train_arcycle, Ablation, ArCycleConfig, ArCycleData, ConvGenerator, Judges};
use arbench::emit::Provenance;
use arbench::models::{bits_per_dim, load_model, save_model, ArModel, PixelArConfig, PixelArModel};
use arbench::training::{train_mle, OptConfig};
use arbench::workbench::{colorize_mnist, synthetic_digits, Dataset};

fn density(path: &Path, data: &Dataset, seed: u64) -> arbench::Result<Box<dyn ArModel>> {
    if path.exists() {
        return load_model(path);
    }
    let s = data.example_shape();
    let mut model = PixelArModel::new(PixelArConfig::new(s[0], s[1], s[2], seed))?;
    let cfg = OptConfig {
        batch_size: 16,
        learning_rate: 3e-3,
        max_steps: 1000,
        seed,
        ..OptConfig::default()
    };
    let t0 = Instant::now();
    let report = train_mle(&mut model, &data.examples, &cfg)?;
    println!(
        "trained {} model: {:.3} bits/dim in {:.0}s",
        data.name,
        report.tail_mean(100).unwrap(),
        t0.elapsed().as_secs_f64()
    );
    save_model(&model, path)?;
    Ok(Box::new(model))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn main() -> arbench::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let ablation: Ablation = args.get(1).map_or(Ok(Ablation::Full), |s| s.parse())?;
    let steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(8000);
    let out = PathBuf::from(args.get(3).map_or("out/arcycle", String::as_str));
    std::fs::create_dir_all(&out).map_err(|source| arbench::Error::Io { path: out.clone(), source })?;
    let lr: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(3e-3);
    let hidden: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(32);
    let seed = 11;

    let gray_a = synthetic_digits(3000, seed, true)?;
    let gray_b = synthetic_digits(3000, seed + 1, true)?;
    let colored_a = colorize_mnist(&gray_a, seed + 2)?;
    let colored_b = colorize_mnist(&gray_b, seed + 3)?;
    let px = density(&out.join("px.ardx"), &colored_a, seed)?;
    let py = density(&out.join("py.ardx"), &gray_b, seed + 1)?;

    let test_gray = synthetic_digits(300, seed + 20, true)?;
    let test_colored = colorize_mnist(&synthetic_digits(300, seed + 21, true)?, seed + 22)?;
    let test_y = mean(&bits_per_dim(py.as_ref(), &test_gray.examples)?);
    let test_x = mean(&bits_per_dim(px.as_ref(), &test_colored.examples)?);
    println!("held-out NLL: X {test_x:.3}, Y {test_y:.3} bits/dim");

    let data = ArCycleData {
        x: colored_a.examples.clone(),
        x_target: gray_a.examples.clone(),
        y: gray_b.examples.clone(),
        y_target: colored_b.examples.clone(),
    };
    let mut f = ConvGenerator::new(3, 1, hidden, seed + 30)?;
    let mut g = ConvGenerator::new(1, 3, hidden, seed + 31)?;
    let cfg = ArCycleConfig {
        ablation,
        steps,
        snapshot_every: (steps / 4).max(1),
        opt: OptConfig {
            batch_size: 8,
            learning_rate: lr,
            seed,
            ..OptConfig::default()
        },
        ..ArCycleConfig::default()
    };
    let t0 = Instant::now();
    let judges = Judges { px: px.as_ref(), py: py.as_ref() };
    let report = train_arcycle(&mut f, &mut g, &judges, &data, &cfg)?;
    println!("beta {:.4}, {:.0}s", report.beta, t0.elapsed().as_secs_f64());
    for chunk in report.rows.chunks((steps / 10).max(1)) {
        let k = chunk.len() as f64;
        println!(
            "iter {:>5}: l_cyc {:.4}  nll_x {:.3}  nll_y {:.3}",
            chunk[0].iteration,
            chunk.iter().map(|r| r.l_cyc).sum::<f64>() / k,
            chunk.iter().map(|r| r.nll_x_bits).sum::<f64>() / k,
            chunk.iter().map(|r| r.nll_y_bits).sum::<f64>() / k,
        );
    }
    let prov = Provenance::new("arcycle", seed).with("ablation", ablation.name());
    report.to_csv(prov).save(&out.join(format!("{}.csv", ablation.name())))?;
    report.write_snapshots(&out, -1.0, 1.0)?;
    Ok(())
}

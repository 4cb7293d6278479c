//! Gradient ascent on log-likelihood from noise, black, gray, and white
//! start images under a briefly trained digit model. Prints the bits/dim
//! trajectory and writes PGM snapshots.
//!
//! ```text
//! cargo run --release --example optimize_probes -- [train_steps] [opt_steps] [out_dir]
//! ```

use std::path::PathBuf;

use arbench::emit::{pgm_bytes, write_bytes};
use arbench::models::{ArModel, PixelArConfig, PixelArModel};
use arbench::sample_opt::{optimize_samples, probe_start_set, ProbeKind};
use arbench::training::{train_mle, OptConfig};
use arbench::workbench::synthetic_digits;

fn main() -> arbench::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let train_steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let opt_steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(200);
    let out = PathBuf::from(args.get(3).map_or("out/optimize_probes", String::as_str));
    let seed = 3;

    let train = synthetic_digits(2000, seed, true)?;
    let mut model = PixelArModel::new(PixelArConfig::new(1, 14, 14, seed))?;
    let cfg = OptConfig { batch_size: 16, learning_rate: 3e-3, max_steps: train_steps, seed, ..OptConfig::default() };
    train_mle(&mut model, &train.examples, &cfg)?;
    let bins = *model.bins();

    for kind in [ProbeKind::Noise, ProbeKind::Black, ProbeKind::Gray, ProbeKind::White] {
        let x0 = probe_start_set(kind, 2, &[1, 14, 14], &bins, seed, None)?;
        let rec = optimize_samples(&model, &x0, opt_steps, 1e-3, (opt_steps / 4).max(1))?;
        let path: Vec<String> = rec.entries.iter().map(|e| format!("{:.3}", e.nll_bits_per_dim)).collect();
        println!("{:>6}: {} bits/dim", kind.name(), path.join(" -> "));
        let last = rec.last().expect("logged final step");
        let first = &last.snapshot.data()[..196];
        write_bytes(&out.join(format!("{}_final.pgm", kind.name())), &pgm_bytes(first, 14, 14, -1.0, 1.0)?)?;
    }
    println!("snapshots in {}", out.display());
    Ok(())
}

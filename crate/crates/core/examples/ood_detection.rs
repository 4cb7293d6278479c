//! Fits likelihood-interval detectors to a digit model and prints the
//! percent of each probe set they accept.
//!
//! ```text
//! cargo run --release --example ood_detection -- [train_steps]
//! ```

use arbench::detection::{detection_table, fit_interval, DetectorSet, IntervalKind};
use arbench::emit::Provenance;
use arbench::models::{bits_per_dim, PixelArConfig, PixelArModel};
use arbench::training::{train_mle, OptConfig};
use arbench::workbench::{make_probe_images, synthetic_digits, synthetic_shapes, ProbeImageKind};

fn main() -> arbench::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(400);
    let seed = 3;
    let train = synthetic_digits(2000, seed, true)?;
    let mut model = PixelArModel::new(PixelArConfig::new(1, 14, 14, seed))?;
    let cfg = OptConfig { batch_size: 16, learning_rate: 3e-3, max_steps: steps, seed, ..OptConfig::default() };
    train_mle(&mut model, &train.examples, &cfg)?;

    let fit_bits = bits_per_dim(&model, &train.head(500)?.examples)?;
    let intervals = IntervalKind::ALL
        .into_iter()
        .map(|k| fit_interval(&fit_bits, k))
        .collect::<arbench::Result<Vec<_>>>()?;
    let mut test = synthetic_digits(200, seed + 1, true)?;
    test.name = "digits-test".into();
    let mut probes = vec![test, synthetic_shapes(200, seed + 2, true)?];
    for kind in [ProbeImageKind::Noise, ProbeImageKind::Black, ProbeImageKind::White] {
        probes.push(make_probe_images(kind, 200, [1, 14, 14], seed)?);
    }
    let matrix = detection_table(&model, &DetectorSet { intervals, ccg: None }, &probes)?;
    print!("{}", matrix.to_text(&Provenance::new("detect", seed).with("train_steps", steps)));
    Ok(())
}

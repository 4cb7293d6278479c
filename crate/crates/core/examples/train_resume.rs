//! Trains the toy MADE model halfway, writes an ARDX1 checkpoint, resumes
//! from it, and checks the result against an uninterrupted run.
//!
//! ```text
//! cargo run --example train_resume -- [out_dir]
//! ```

use std::path::PathBuf;

use arbench::models::checkpoint::Checkpoint;
use arbench::models::{ArModel, MadeConfig, MadeModel};
use arbench::training::{MleTrainer, OptConfig};
use arbench::workbench::gen_manifold2d;

fn main() -> arbench::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "out/resume".into()));
    std::fs::create_dir_all(&out).map_err(|e| arbench::Error::io(&out, e))?;
    let data = gen_manifold2d(2000, 5)?.examples;
    let cfg = OptConfig { max_steps: 400, batch_size: 50, seed: 5, ..OptConfig::default() };

    let mut straight = MadeModel::new(MadeConfig::toy(5))?;
    let mut t = MleTrainer::new(&straight, cfg.clone())?;
    t.run_until(&mut straight, &data, 400)?;

    let mut half = MadeModel::new(MadeConfig::toy(5))?;
    let mut t = MleTrainer::new(&half, cfg.clone())?;
    t.run_until(&mut half, &data, 200)?;
    let path = out.join("half.ardx");
    t.save(&half, &path)?;
    println!("wrote {} ({} bytes)", path.display(), std::fs::metadata(&path).map_or(0, |m| m.len()));

    let (mut resumed, mut t2) = MleTrainer::resume(&Checkpoint::load(&path)?, cfg)?;
    t2.run_until(resumed.as_mut(), &data, 400)?;
    println!("final batch NLL {:.4} nats", t2.report().steps.last().map_or(f64::NAN, |s| s.nll_nats));
    println!("bitwise equal to the uninterrupted run: {}", resumed.params().bitwise_eq(straight.params()));
    Ok(())
}

//! Parses a `key = value` run configuration, the same format the command
//! line reads, and executes it through the workbench. A small heatmap run
//! is used by default.
//!
//! ```text
//! cargo run --release --example run_from_config -- [config_path]
//! ```

use arbench::workbench::{run_experiment, ExperimentKind, RunConfig};

const DEFAULT: &str = "\
# Short toy run: 2000 steps, three checkpoint fields on a 60×60 grid.
kind = heatmap
seed = 7
out_dir = out/config_heatmap
steps = 2000
checkpoints = 3
grid = 60
";

fn main() -> arbench::Result<()> {
    let cfg = match std::env::args().nth(1) {
        Some(path) => {
            let text = std::fs::read_to_string(&path).map_err(|e| arbench::Error::io(&path, e))?;
            let kind = text
                .lines()
                .find_map(|l| l.trim().strip_prefix("kind").and_then(|r| r.trim().strip_prefix('=')))
                .map(str::trim)
                .and_then(|k| ExperimentKind::ALL.into_iter().find(|e| e.name() == k))
                .ok_or_else(|| arbench::Error::Config(format!("{path} needs a `kind = ...` line")))?;
            RunConfig::parse(&text, kind)?
        }
        None => RunConfig::parse(DEFAULT, ExperimentKind::Heatmap)?,
    };
    print!("{}", cfg.render());
    let outcome = run_experiment(&cfg)?;
    for (k, v) in &outcome.metrics {
        println!("{k:<28} {v:.6}");
    }
    println!("{} files in {}", outcome.files.len(), outcome.out_dir.display());
    Ok(())
}

//! Command-line front end: one subcommand per experiment.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use arbench::workbench::{run_experiment, schema, ExperimentKind, RunConfig};

#[derive(Parser)]
#[command(name = "arbench", version, about = "Autoregressive density-model experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a pixel model, a MADE model, or a digit classifier.
    Train(Common),
    /// Map the input-gradient norm of a toy model over a 2-D grid.
    Heatmap(Common),
    /// Ascend log-likelihood from probe images.
    Optimize(Common),
    /// Tabulate out-of-distribution detector acceptance rates.
    Detect(Common),
    /// Train cycle-consistent translators judged by frozen density models.
    Arcycle(Common),
    /// Re-render heatmaps and tables from stored CSVs.
    Report(Common),
}

#[derive(Args)]
struct Common {
    /// `key = value` run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// List the accepted keys with defaults and exit.
    #[arg(long)]
    keys: bool,
}

fn build(kind: ExperimentKind, c: &Common) -> arbench::Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(path) => RunConfig::load(path, kind)?,
        None => RunConfig::defaults(kind),
    };
    if let Some(seed) = c.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    if let Some(out) = &c.out {
        cfg.set("out_dir", &out.to_string_lossy())?;
    }
    for kv in &c.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| arbench::Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (kind, common) = match &cli.command {
        Command::Train(c) => (ExperimentKind::Train, c),
        Command::Heatmap(c) => (ExperimentKind::Heatmap, c),
        Command::Optimize(c) => (ExperimentKind::Optimize, c),
        Command::Detect(c) => (ExperimentKind::Detect, c),
        Command::Arcycle(c) => (ExperimentKind::Arcycle, c),
        Command::Report(c) => (ExperimentKind::Report, c),
    };
    if common.keys {
        for s in schema(kind) {
            println!("{:<24} {:<36} {}", s.key, if s.default.is_empty() { "-" } else { s.default }, s.help);
        }
        return ExitCode::SUCCESS;
    }
    let result = build(kind, common).and_then(|cfg| run_experiment(&cfg));
    match result {
        Ok(outcome) => {
            for (k, v) in &outcome.metrics {
                println!("{k:<40} {v:.6}");
            }
            println!("wrote {} files to {}", outcome.files.len(), outcome.out_dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error [{}]: {e}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

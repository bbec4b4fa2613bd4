use std::path::PathBuf;

use anyhow::Context;
use clap::Parser;
use slotbench::{ExperimentConfig, Harness, Overrides, Stage, Status};

#[derive(Debug, Parser)]
#[command(name = "slotbench", about = "Object-centric representation benchmark on a simulated block-pushing table")]
struct Cli {
    /// gen-data, train-repr, train-localizer, eval-pck, train-policy,
    /// eval-policy, sweep or report
    stage: Stage,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    data_fraction: Option<f64>,
    #[arg(long)]
    pck_threshold: Option<f64>,
    /// Re-run even if an identical run is cached.
    #[arg(long)]
    force: bool,
    /// Artifact root.
    #[arg(long, env = "SLOTBENCH_ROOT", default_value = "slotbench-artifacts")]
    root: PathBuf,
    #[arg(long, short)]
    quiet: bool,
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let overrides = Overrides { seed: cli.seed, k: cli.k, data_fraction: cli.data_fraction, pck_threshold: cli.pck_threshold };
    let config = ExperimentConfig::load(&cli.config)
        .and_then(|c| c.apply(&overrides))
        .with_context(|| format!("loading {}", cli.config.display()))?;
    let harness = Harness {
        root: cli.root,
        force: cli.force,
        exe: Some(std::env::current_exe().context("locating the slotbench binary")?),
        verbose: !cli.quiet,
    };
    let out = harness.run(cli.stage, &config).with_context(|| format!("stage {}", cli.stage))?;
    let status = match out.status {
        Status::Completed => "completed",
        Status::Cached => "cached",
    };
    println!("{} {} {} {}", out.stage, status, out.hash, out.dir.display());
    Ok(())
}

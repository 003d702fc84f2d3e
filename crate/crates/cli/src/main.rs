use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use canopy_cli::{commands, RunConfig};
use clap::{Parser, Subcommand};

/// Canopy height pipeline: synthetic data, GEDI filtering, compositing, gridding,
/// training, evaluation and sharpness analysis.
#[derive(Parser, Debug)]
#[command(name = "canopy", version)]
struct Cli {
    /// Run configuration (INI). Defaults apply to anything left out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `[run] seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for data loading, per-sample gradients and evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    /// Output directory; for `synth` this is the dataset directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Cmd {
    /// Generate the synthetic tiles, GEDI shots, labels and a cloudy stack.
    Synth,
    /// Apply the GEDI quality rules and report per-rule counts.
    Filter,
    /// Rain-gate and median-composite an acquisition stack.
    Composite,
    /// Assign grid cells to height-distribution sets and split them.
    Grid,
    /// Train the configured model, checkpointing every epoch; resumes when checkpoints exist.
    Train,
    /// Predict on evaluation tiles and write metric, binned and GSI reports.
    Eval,
    /// Sharpness (GSI) of height rasters against S2 reference imagery.
    Gsi,
    /// Print the effective configuration.
    Config,
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.run.seed = s;
    }
    if let Some(o) = &cli.out {
        let o = o.to_string_lossy().into_owned();
        match cli.cmd {
            Cmd::Synth => cfg.data.dataset = o,
            _ => cfg.run.out = o,
        }
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cli.workers.max(1)).build().context("starting worker pool")?;
    pool.install(|| match cli.cmd {
        Cmd::Synth => commands::synth(&cfg).map(drop),
        Cmd::Filter => commands::filter(&cfg).map(drop),
        Cmd::Composite => commands::composite(&cfg).map(drop),
        Cmd::Grid => commands::grid(&cfg).map(drop),
        Cmd::Train => commands::train(&cfg).map(|o| println!("final checkpoint: {}", o.checkpoint.display())),
        Cmd::Eval => commands::eval(&cfg).map(drop),
        Cmd::Gsi => commands::gsi_cmd(&cfg).map(drop),
        Cmd::Config => {
            print!("{}", cfg.serialize());
            Ok(())
        }
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CANOPY_LOG", "info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

//! `geoward`: train small MLPs, analyse their metric spectrum, trace damage
//! paths and run geodesic recovery, with every run recorded in a manifest.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod data;
mod manifest;

use commands::{
    DamagePathArgs, ExportArgs, Invocation, PerturbArgs, ReconfigureArgs, RecoverArgs, SpectrumArgs, TrainArgs,
};

#[derive(Parser, Debug)]
#[command(
    name = "geoward",
    version,
    about = "Metric-based resilience analysis and geodesic recovery for MLPs"
)]
struct Cli {
    /// Worker threads (default: all cores)
    #[arg(long, global = true, env = "GEOWARD_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a network and write a checkpoint
    Train(TrainArgs),
    /// Metric spectrum at a checkpoint
    Spectrum(SpectrumArgs),
    /// Random and adversarial weight perturbations
    Perturb(PerturbArgs),
    /// Trace a damage path (straight-line or node-by-node)
    DamagePath(DamagePathArgs),
    /// Geodesic recovery onto a damage hyperplane
    Recover(RecoverArgs),
    /// Move a damaged network from one damage plan to another
    Reconfigure(ReconfigureArgs),
    /// Write a dataset specifier out as CSV
    ExportData(ExportArgs),
    /// Re-run a command from its manifest
    Replay {
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory (default: the recorded one)
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot set up {n} worker threads: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Train(a) => Invocation::Train(a).run(),
        Command::Spectrum(a) => Invocation::Spectrum(a).run(),
        Command::Perturb(a) => Invocation::Perturb(a).run(),
        Command::DamagePath(a) => Invocation::DamagePath(a).run(),
        Command::Recover(a) => Invocation::Recover(a).run(),
        Command::Reconfigure(a) => Invocation::Reconfigure(a).run(),
        Command::ExportData(a) => Invocation::ExportData(a).run(),
        Command::Replay { manifest, out } => commands::replay(&manifest, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

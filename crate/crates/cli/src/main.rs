mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dspa_core::DspaError;

use crate::commands::{audit, flops, map, steer, theory};
use crate::config::ConfigFile;

const EXIT_INTERNAL: u8 = 1;
const EXIT_VALIDATION: u8 = 2;
const EXIT_THEORY: u8 = 3;

#[derive(Parser)]
#[command(name = "dspa", version, about = "Density-conditioned SAE steering toolkit")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "DSPA_THREADS")]
    threads: Option<usize>,

    /// JSON config file with one section per subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the conditional-difference map from a triple manifest.
    BuildMap(map::BuildMapArgs),
    /// Drop map entries below the boundary magnitude cut.
    Sparsify(map::SparsifyArgs),
    /// Steer a stream of output-layer hidden states for one prompt.
    Steer(steer::SteerArgs),
    /// Global augment/ablate sets, overlaps and plan coverage.
    Audit(audit::AuditArgs),
    /// Highest activations of one feature across traces.
    Evidence(audit::EvidenceArgs),
    /// Synthetic checks of the map's population structure.
    Theory(theory::TheoryArgs),
    /// Alignment-stage compute model.
    Flops(flops::FlopsArgs),
}

/// Whether the command's own checks passed.
pub enum Outcome {
    Ok,
    ChecksFailed,
}

fn run(cli: Cli) -> anyhow::Result<Outcome> {
    let threads = match cli.threads {
        Some(0) | None => None,
        Some(n) => {
            rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
            Some(n)
        }
    };
    let file = ConfigFile::load(cli.config.as_deref())?;
    let ctx = commands::Context { threads, file };
    match cli.command {
        Command::BuildMap(a) => map::build_map(a, &ctx),
        Command::Sparsify(a) => map::sparsify(a, &ctx),
        Command::Steer(a) => steer::steer(a, &ctx),
        Command::Audit(a) => audit::audit(a, &ctx),
        Command::Evidence(a) => audit::evidence(a, &ctx),
        Command::Theory(a) => theory::theory(a, &ctx),
        Command::Flops(a) => flops::flops(a, &ctx),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::ChecksFailed) => ExitCode::from(EXIT_THEORY),
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = match e.downcast_ref::<DspaError>() {
                Some(d) if d.is_validation() => EXIT_VALIDATION,
                _ => EXIT_INTERNAL,
            };
            ExitCode::from(code)
        }
    }
}

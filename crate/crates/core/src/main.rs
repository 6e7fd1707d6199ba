use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use nvzeno::experiment::{run_oracle, simulate, ExperimentConfig};
use nvzeno::{Error, Result};

/// NV-center relaxation and quantum Zeno simulations with the cluster-correlation expansion.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the convergence sweep (if configured) and the Zeno study.
    Simulate {
        config: PathBuf,
        /// Output directory; overrides `output_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a config without running anything.
    Validate { config: PathBuf },
    /// Propagate the whole bath exactly (small baths only).
    Oracle {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn out_dir(cfg: &ExperimentConfig, out: Option<PathBuf>) -> Result<PathBuf> {
    out.or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| Error::Config("no output directory: pass --out or set output_dir".into()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let dir = out_dir(&cfg, out)?;
            let z = simulate(&cfg, &dir)?;
            eprintln!(
                "done in {:.1} s: {} clusters, {} guarded points, output in {}",
                z.wall_seconds,
                z.cce.n_clusters,
                z.cce.guard_count,
                dir.display()
            );
        }
        Command::Validate { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            println!("ok {}", cfg.hash());
        }
        Command::Oracle { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let dir = out_dir(&cfg, out)?;
            let curve = run_oracle(&cfg, &dir)?;
            eprintln!("exact curve for {} spins written to {}", curve.meta.n_spins, dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

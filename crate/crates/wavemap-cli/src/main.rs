use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use wavemap::cli::{execute, Command, RunConfig};

/// Characteristic-lattice solver for forced wave maps into spheres.
#[derive(Parser, Debug)]
#[command(name = "wavemap", version)]
struct Args {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Solve on the configured trapezoid and write the solution and diagnostics.
    Solve(Common),
    /// Run the randomized inequality suite and the checks on the configured solution.
    VerifyEstimates(Common),
    /// Compute scattering data and the defect series.
    Scatter(Common),
    /// Convergence study over the configured spacings.
    Converge(Common),
}

#[derive(clap::Args, Debug)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads (defaults to all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Overrides the seed from the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("WAVEMAP_LOG", "warn")).init();
    let args = Args::parse();
    let (cmd, common) = match args.cmd {
        Cmd::Solve(c) => (Command::Solve, c),
        Cmd::VerifyEstimates(c) => (Command::Verify, c),
        Cmd::Scatter(c) => (Command::Scatter, c),
        Cmd::Converge(c) => (Command::Converge, c),
    };
    let mut config = match RunConfig::load(&common.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    if let Some(s) = common.seed {
        config.seed = s;
    }
    match execute(cmd, &config, &common.out, common.threads) {
        Ok(summary) => {
            log::info!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

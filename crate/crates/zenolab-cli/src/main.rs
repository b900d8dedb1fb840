use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use zenolab_cli::config::ExperimentConfig;
use zenolab_cli::runner::{self, Command as RunCommand};
use zenolab_cli::RunError;

/// Batch experiment runner for monitored momentum-space dynamics: conditioned
/// moment tables, the calibrated ratio flow and its stationary points, the
/// fast-sector correction tensor, detailed-balance equilibria, anisotropy
/// sweeps and a self-check suite.
#[derive(Parser, Debug)]
#[command(name = "zenolab", version, about)]
struct Cli {
    /// JSON configuration file; defaults apply for absent fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory for artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Override the configured random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the configured Monte Carlo sample count.
    #[arg(long, global = true)]
    samples: Option<u64>,

    /// Print the fully-populated default configuration and exit.
    #[arg(long)]
    print_default_config: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Second-moment table of the conditioned increment law over a κ-grid.
    Moments,
    /// Integrate the calibrated ratio flow and emit the trajectory.
    Flow,
    /// Search the configured bracket for a stationary ratio.
    FixedPoint,
    /// Monte Carlo estimate of the fast-sector correction tensor.
    SchurSigma,
    /// Detailed-balance lattice dynamics and its Gibbs equilibrium.
    Equilibrium,
    /// Anisotropic-perturbation contraction sweep.
    Anisotropy,
    /// Run the full invariant suite; nonzero exit on any failure.
    Verify,
}

impl From<Command> for RunCommand {
    fn from(c: Command) -> Self {
        match c {
            Command::Moments => RunCommand::Moments,
            Command::Flow => RunCommand::Flow,
            Command::FixedPoint => RunCommand::FixedPoint,
            Command::SchurSigma => RunCommand::SchurSigma,
            Command::Equilibrium => RunCommand::Equilibrium,
            Command::Anisotropy => RunCommand::Anisotropy,
            Command::Verify => RunCommand::Verify,
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, RunError> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            ExperimentConfig::from_json(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.mc.seed = seed;
    }
    if let Some(samples) = cli.samples {
        cfg.mc.samples = samples;
        cfg.validate()?;
    }
    Ok(cfg)
}

fn try_main(cli: &Cli) -> Result<(), RunError> {
    if cli.print_default_config {
        println!("{}", ExperimentConfig::default().to_json());
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(RunError::Config {
            field: "<cli>".to_string(),
            message: "missing subcommand; see --help".to_string(),
        });
    };
    let cfg = load_config(cli)?;
    runner::run(command.into(), &cfg, &cli.out)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match try_main(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", err.to_error_json());
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

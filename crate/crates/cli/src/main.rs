use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use vns_cli::commands::{self, Context};
use vns_cli::{manifest, parse_config, RunStatus};

/// Simulation workbench for a kinetic-fluid pipe flow: friction-coupled
/// phase-space transport with injection/absorption boundaries and an
/// incompressible channel flow.
#[derive(Parser)]
#[command(name = "vns", version, about)]
struct Cli {
    /// Path to the run configuration (flat `key = value` file).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Worker threads (0 = library default).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    /// Seed override for randomized estimators.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate one characteristic and write it as CSV.
    Trace,
    /// Check an exit geometric condition over a sampled compact.
    EgcCheck,
    /// Construct a stationary state by fixed-point iteration.
    Equilibrium,
    /// Evolve the coupled system and record the energy ledger.
    Evolve,
    /// Perturb a stationary state and fit the decay rate.
    Stability,
    /// Positive root of the delayed decay-rate equation.
    Gronwall,
    /// Domain constants and scheme self-checks.
    Diagnostics,
}

fn run(cli: &Cli) -> vns_core::Result<RunStatus> {
    let mut cfg = match &cli.config {
        Some(path) => parse_config(path)?,
        None => vns_cli::parse_config_str("")?,
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let threads = if cli.threads > 0 {
        cli.threads
    } else {
        cfg.threads
    };
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .ok();
    }
    let ctx = Context::new(cfg, &cli.out)?;
    let status = match cli.command {
        Command::Trace => commands::cmd_trace(&ctx)?,
        Command::EgcCheck => commands::cmd_egc_check(&ctx)?,
        Command::Equilibrium => commands::cmd_equilibrium(&ctx)?,
        Command::Evolve => commands::cmd_evolve(&ctx)?,
        Command::Stability => commands::cmd_stability(&ctx)?,
        Command::Gronwall => commands::cmd_gronwall(&ctx)?,
        Command::Diagnostics => commands::cmd_diagnostics(&ctx)?,
    };
    manifest::write_manifest(&cli.out)?;
    Ok(status)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(status) => {
            if status == RunStatus::GateFailure {
                eprintln!("gate failure (see reports in the output directory)");
            }
            ExitCode::from(status.exit_code())
        }
        Err(e) => {
            if e.is_gate_failure() {
                eprintln!("gate failure: {e}");
                ExitCode::from(2)
            } else {
                eprintln!("error: {e}");
                ExitCode::from(1)
            }
        }
    }
}

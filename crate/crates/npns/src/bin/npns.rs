use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "npns",
    about = "Electrodiffusion simulator: coupled runs, steady states, run verification, order studies"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a coupled simulation and write diagnostics, snapshots and reports.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "npns-out")]
        out: PathBuf,
        #[arg(long)]
        quiet: bool,
    },
    /// Solve the steady state only and write the equilibrium fields.
    Steady {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "npns-out")]
        out: PathBuf,
        #[arg(long)]
        quiet: bool,
    },
    /// Re-check a recorded run (reads diag.csv and smallness.json in --out).
    Verify {
        #[arg(long, default_value = "npns-out")]
        out: PathBuf,
    },
    /// Manufactured-solution and step-refinement order studies.
    Convergence {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 3)]
        levels: usize,
        #[arg(long)]
        quiet: bool,
    },
}

fn main() -> ExitCode {
    npns::cli::init_threads();
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Run { config, out, quiet } => npns::cli::cmd_run(&config, &out, quiet),
        Command::Steady { config, out, quiet } => npns::cli::cmd_steady(&config, &out, quiet),
        Command::Verify { out } => {
            npns::cli::cmd_verify(&out.join("diag.csv"), &out.join("smallness.json"))
        }
        Command::Convergence {
            config,
            levels,
            quiet,
        } => npns::cli::cmd_convergence(&config, levels, quiet),
    };
    ExitCode::from(code as u8)
}

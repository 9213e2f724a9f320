mod commands;
mod config;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::ProvenanceArg;

#[derive(Parser, Debug)]
#[command(name = "ddmpc", version, about = "Robust data-driven MPC experiments")]
pub struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true, value_name = "PATH", conflicts_with = "scenario")]
    pub config: Option<PathBuf>,

    /// Built-in scenario: two-mass-spring or output-second-order.
    #[arg(long, global = true, value_name = "NAME")]
    pub scenario: Option<String>,

    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,

    /// Data seed; the closed-loop seed becomes seed + 1.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Source of the system constants.
    #[arg(long, global = true, value_enum)]
    pub provenance: Option<ProvenanceArg>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// Run the excitation experiment and save the datasets.
    Collect,
    /// Compute system constants from saved datasets.
    Estimate,
    /// Tightening coefficients from saved constants, with plots.
    Coefficients,
    /// Full pipeline and closed loop; exits 1 if a monitor fails.
    Run,
    /// Two-mass-spring example with a pass/fail table and a report.
    ReproduceExample,
}

/// Exit codes.
pub const EXIT_FAIL: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::dispatch(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_FAIL),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

//! File formats and subcommands behind the `agmm` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod plot;

use std::ffi::OsString;

use clap::{Parser, Subcommand};

use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "agmm", version, about = "Rigid point-cloud registration with adaptive Gaussian mixtures")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Align a moving cloud onto a fixed cloud.
    Register(commands::RegisterArgs),
    /// Make a fixed/moving pair from a model with known ground truth.
    Synth(commands::SynthArgs),
    /// Run both methods over a grid of one perturbation factor.
    Sweep(commands::SweepArgs),
    /// Compare two transform files.
    Eval(commands::EvalArgs),
    /// Write generated model shapes to a directory.
    Generate(commands::GenerateArgs),
}

/// Caps the global thread pool from `AGMM_THREADS` (unset or 0: all cores).
fn configure_threads() -> CliResult<()> {
    let Ok(value) = std::env::var("AGMM_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .map_err(|_| CliError::usage(format!("AGMM_THREADS must be a count, got {value:?}")))?;
    if threads > 0 {
        // a pool built earlier in this process keeps its size
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    Ok(())
}

pub fn execute(command: &Command) -> CliResult<String> {
    configure_threads()?;
    match command {
        Command::Register(args) => commands::register(args),
        Command::Synth(args) => commands::synth(args),
        Command::Sweep(args) => commands::sweep(args),
        Command::Eval(args) => commands::eval(args),
        Command::Generate(args) => commands::generate(args),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli.command) {
        Ok(text) => {
            print!("{text}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.kind.exit_code()
        }
    }
}

//! `subscale`: scaling-law fitting, compute allocation and data-density
//! analysis from the command line.
//!
//! Exit codes: 0 success, 1 input or usage error, 2 analytic failure
//! (no convergence, no interior minimum, degenerate geometry, or a replay
//! that does not reproduce its outputs).

mod commands;
mod manifest;
mod svg;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use subscale::alloc::AllocError;
use subscale::density::DensityError;
use subscale::fit::FitError;

use crate::commands::{AnalyticFailure, Command};

#[derive(Debug, Parser)]
#[command(name = "subscale", version, about = "Scaling-law and data-density analysis")]
struct Cli {
    /// Overrides every seed in configs and fixture specs.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for multistart fitting and k-means.
    #[arg(long, global = true, env = "SUBSCALE_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

pub(crate) fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        let analytic = cause.is::<AnalyticFailure>()
            || matches!(cause.downcast_ref(), Some(FitError::NoConvergence { .. }))
            || matches!(cause.downcast_ref(), Some(AllocError::NoInteriorMinimum { .. }))
            || matches!(cause.downcast_ref(), Some(DensityError::DegenerateGeometry));
        if analytic {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match commands::run(&cli.command, cli.seed) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

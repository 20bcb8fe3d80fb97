//! Command-line front end: `verify`, `scan` and `run`.

pub mod config;
pub mod run;
pub mod scan;
pub mod verify;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "cvqnd", version, about = "Measurement-mediated multipartite QND coupling: simulation and entanglement certification")]
pub struct Cli {
    /// Worker threads for grid scans and Monte Carlo (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the closed-form identity suite; exits nonzero if any identity fails.
    Verify {
        /// Shift every compatible t_d by this amount in the generic identities.
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        perturb_td: f64,
        /// Target-mode count for the generic identities.
        #[arg(long)]
        n: Option<usize>,
        /// Crossover index for the generic identities (default N-1 when --n is given).
        #[arg(long)]
        m: Option<usize>,
    },
    /// Evaluate a (t_o, s) grid and write CSV.
    Scan {
        config: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Evaluate a single point and print a JSON report.
    Run { config: PathBuf },
}

/// Exit status 0 on success, 1 when verification fails, 2 on errors.
pub fn main_with(cli: Cli) -> ExitCode {
    if let Some(k) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(k).build_global() {
            eprintln!("error: cannot configure {k} threads: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Verify { perturb_td, n, m } => {
            let opts = verify::VerifyOptions { n, m, perturb_td };
            match verify::cmd_verify(&opts, &mut std::io::stdout().lock()) {
                Ok(true) => return ExitCode::SUCCESS,
                Ok(false) => return ExitCode::from(1),
                Err(e) => Err(e.to_string()),
            }
        }
        Command::Scan { config, output } => scan::cmd_scan(&config, &output)
            .map(|rows| eprintln!("wrote {rows} rows to {}", output.display()))
            .map_err(|e| e.to_string()),
        Command::Run { config } => run::cmd_run(&config).map_err(|e| e.to_string()).and_then(|json| {
            let mut out = std::io::stdout().lock();
            match writeln!(out, "{json}") {
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.to_string()),
                _ => Ok(()),
            }
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

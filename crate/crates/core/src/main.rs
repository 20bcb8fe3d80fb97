use std::process::ExitCode;

use clap::Parser;
use cvqnd::cli::{main_with, Cli};

fn main() -> ExitCode {
    main_with(Cli::parse())
}

use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    popsynth_cli::main_with(popsynth_cli::Cli::parse())
}

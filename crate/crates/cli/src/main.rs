use std::process::ExitCode;

use bdlab_cli::app::{dispatch, Cli, EXIT_CONFIG, EXIT_FAIL};
use bdlab_cli::CliError;
use clap::Parser;

fn main() -> ExitCode {
    let code = match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e @ CliError::Config(_)) => {
            eprintln!("bdlab: {e}");
            EXIT_CONFIG
        }
        Err(e) => {
            eprintln!("bdlab: {e}");
            EXIT_FAIL
        }
    };
    ExitCode::from(code as u8)
}

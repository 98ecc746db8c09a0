//! `flowdirect` command-line driver.
//!
//! Exit codes: 0 on success, 1 when a run fails, 2 on invalid usage.

mod args;
mod commands;
mod settings;

use std::process::ExitCode;

use clap::Parser;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, specs or config; exit code 2.
    Usage(String),
    /// Failure while running; exit code 1.
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<flowdirect::FlowError> for CliError {
    fn from(e: flowdirect::FlowError) -> Self {
        CliError::Runtime(e.into())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

fn main() -> ExitCode {
    let cli = match args::Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

mod args;
mod commands;
mod data;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

/// Failure of a command, mapped onto the process exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Lib(switchode::Error),
}

impl From<switchode::Error> for CliError {
    fn from(e: switchode::Error) -> Self {
        CliError::Lib(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Lib(switchode::Error::Argument(_)) => 2,
            CliError::Lib(e) if e.is_numerical() => 4,
            CliError::Lib(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "usage error: {msg}"),
            CliError::Lib(e) if e.is_numerical() => write!(f, "numerical failure: {e}"),
            CliError::Lib(e) => write!(f, "{e}"),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => commands::simulate(&a),
        Command::Denoise(a) => commands::denoise(&a),
        Command::Fit(a) => commands::fit(&a),
        Command::Select(a) => commands::select(&a),
        Command::Eval(a) => commands::eval(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("switchode: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

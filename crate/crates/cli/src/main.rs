//! `delcert`: certify, calibrate, check bounds exhaustively, and report.

mod builders;
mod commands;

use std::process::ExitCode;

use clap::Parser;

use commands::Command;

/// Exit statuses by error class.
pub mod exit {
    pub const OK: u8 = 0;
    pub const CONFIG: u8 = 2;
    pub const IO: u8 = 3;
    pub const TRANSPORT: u8 = 4;
    pub const BUDGET: u8 = 5;
    pub const VALIDATION: u8 = 6;
}

#[derive(Parser, Debug)]
#[command(name = "delcert", version, about = "Edit-distance certificates for deletion-smoothed classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Raised when the exhaustive check finds a bound violation.
#[derive(Debug)]
pub struct ValidationFailed(pub usize);

impl std::fmt::Display for ValidationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} bound violation(s) found", self.0)
    }
}

impl std::error::Error for ValidationFailed {}

fn exit_code(err: &anyhow::Error) -> u8 {
    use delcert::Error as E;
    for cause in err.chain() {
        if cause.downcast_ref::<ValidationFailed>().is_some() {
            return exit::VALIDATION;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Io(_) | E::Json(_) | E::EmptyInput(_) => exit::IO,
                E::Transport { .. } | E::Timeout { .. } | E::Protocol(_) | E::ProtocolVersion { .. } | E::Classifier(_) => {
                    exit::TRANSPORT
                }
                E::BudgetExceeded { .. } => exit::BUDGET,
                _ => exit::CONFIG,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return exit::IO;
        }
    }
    exit::CONFIG
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::from(exit::OK),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

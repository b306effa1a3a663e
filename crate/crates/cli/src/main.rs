//! `sdpcert`: train, certify, attack and report on two-layer networks.
//!
//! Every command takes a single `key = value` run file. Exit codes: 0 success,
//! 1 usage or configuration error, 2 integrity failure or training divergence.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::IntegrityError;
use crate::config::Config;

#[derive(Parser)]
#[command(
    name = "sdpcert",
    version,
    about = "Certified robustness for two-layer networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network; writes weights, checkpoint, log and (sdp_dual) certificate.
    Train { config: PathBuf },
    /// Certified, spectral and Frobenius error over an epsilon grid.
    Certify { config: PathBuf },
    /// FGSM / PGD attack errors over an epsilon grid.
    Attack { config: PathBuf },
    /// Combine a certificate and attack summary; checks lower <= upper.
    Report { config: PathBuf },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<IntegrityError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<sdpcert::Error>() {
            return match e {
                sdpcert::Error::Divergence(_) | sdpcert::Error::InvalidCertificate(_) => 2,
                _ => 1,
            };
        }
    }
    1
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let (path, cmd): (_, fn(&Config) -> anyhow::Result<()>) = match &cli.command {
        Command::Train { config } => (config, commands::train),
        Command::Certify { config } => (config, commands::certify),
        Command::Attack { config } => (config, commands::attack),
        Command::Report { config } => (config, commands::report),
    };
    cmd(&Config::load(path)?)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

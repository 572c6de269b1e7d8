use std::process::ExitCode;

use anyhow::Context;
use clap::Parser;

use mhvae_cli::{run, Cli, CliError};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let stdout = std::io::stdout();
    let result = run(cli, &mut stdout.lock()).context("mhvae failed");
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e);
            let code = e.downcast_ref::<CliError>().map_or(3, CliError::exit_code);
            ExitCode::from(code)
        }
    }
}

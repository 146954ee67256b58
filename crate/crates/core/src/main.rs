use std::process::ExitCode;

use clap::Parser;
use diffocean::cli::{execute, Cli, CliError};

fn main() -> ExitCode {
    let result = match Cli::try_parse() {
        Ok(cli) => execute(&cli.command),
        // help and version requests
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => Err(CliError::usage(&e)),
    };
    match result {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

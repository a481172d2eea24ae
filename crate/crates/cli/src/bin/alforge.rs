use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = alforge_cli::cli::Cli::parse();
    match alforge_cli::cli::execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

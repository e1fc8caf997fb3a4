use std::process::ExitCode;

use clap::Parser;

use cdconv::cli::{execute, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(outcome) => ExitCode::from(outcome.exit_code() as u8),
        Err(e) => {
            eprintln!("cdconv: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

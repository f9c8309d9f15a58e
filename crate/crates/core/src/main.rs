use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use regtopk::cli::{error_kind, error_line, execute, exit_code, Cli};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.to_string();
            let first = message
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ");
            eprintln!("{}", error_line("usage", first));
            return ExitCode::from(2);
        }
    };
    match execute(&cli.command) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_line(error_kind(&e), &e.to_string()));
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}

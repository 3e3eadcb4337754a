use std::io::Write;
use std::process::ExitCode;

use clap::Parser;
use qzo::cli::{main_with, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match main_with(&cli) {
        Ok(msg) => {
            // A closed pipe (e.g. `| head`) is not a failure of the run.
            let _ = writeln!(std::io::stdout(), "{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

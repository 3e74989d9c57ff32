mod cli;
mod commands;
mod http;
mod run;
mod settings;

use std::process::ExitCode;

use clap::Parser;

use crate::cli::Cli;
use crate::run::Run;

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let parsed = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            // --help and --version go to stdout and succeed.
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let out_dir = parsed.command.common().out_dir.clone();
    if let Err(e) = std::fs::create_dir_all(&out_dir) {
        eprintln!("error: creating {}: {e}", out_dir.display());
        return ExitCode::from(EXIT_RUNTIME);
    }
    let mut run = Run::new(parsed.command.name(), &out_dir, argv);
    let outcome = commands::dispatch(parsed.command, &mut run);
    let written = run.finish(&outcome);
    match (outcome, written) {
        (Ok(()), Ok(())) => ExitCode::SUCCESS,
        (Err(e), _) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_RUNTIME)
        }
        (Ok(()), Err(e)) => {
            eprintln!("error: writing run manifest: {e:#}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

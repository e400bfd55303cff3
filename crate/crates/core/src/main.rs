use std::process::ExitCode;

use clap::Parser;
use voxelseg::cli::{run, threads_from_env, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let go = move || run(cli, &mut std::io::stdout().lock(), &mut std::io::stderr());
    let result = threads_from_env().and_then(|threads| match threads {
        Some(n) => voxelseg::with_threads(n, go)?,
        None => go(),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

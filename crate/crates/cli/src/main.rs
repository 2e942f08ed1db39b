use std::process::ExitCode;

use clap::Parser;
use rnvc_cli::args::Cli;
use rnvc_cli::{commands, configure_threads};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // help and version go to stdout with status 0, the rest is a
            // usage error
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let threads = std::env::var("RNVC_THREADS").ok();
    let result = configure_threads(threads.as_deref()).and_then(|()| commands::run(cli.command));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("rnvc: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

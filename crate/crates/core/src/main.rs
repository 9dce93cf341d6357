use std::process::ExitCode;

use clap::Parser;
use xvector::cli::{run, Cli};
use xvector::par;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let threads = std::env::var("XVEC_THREADS").ok().and_then(|v| v.parse().ok());
    par::init_threads(threads);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("xvector: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

//! Command-line front end: argument parsing, renderers, benchmarks and the
//! self-test suite.

use std::ffi::OsString;

use clap::error::ErrorKind;
use clap::Parser;

pub mod args;
pub mod bench;
pub mod checks;
pub mod commands;
pub mod render;

use args::{Cli, Command};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DEGENERATE: i32 = 2;
pub const EXIT_SELFTEST: i32 = 3;

/// Parses `argv` and runs the chosen command, returning the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    if cli.global.threads > 0 {
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.global.threads)
            .build_global();
    }
    let g = &cli.global;
    let result = match &cli.command {
        Command::Epicurve(a) => commands::epicurve(g, a),
        Command::Mask(a) => commands::mask(g, a),
        Command::Bench(a) => commands::bench(g, a),
        Command::Trace(a) => commands::trace(g, a),
        Command::Selftest(a) => commands::selftest(g, a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_degenerate_geometry() {
                EXIT_DEGENERATE
            } else {
                EXIT_USAGE
            }
        }
    }
}

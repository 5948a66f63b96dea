//! Command-line driver. [`run`] parses arguments (expanding `--config`
//! files), dispatches to a subcommand and maps the outcome to an exit code:
//! 0 success, 1 a checked criterion failed, 2 usage or I/O error.

pub mod args;
mod commands;
pub mod config;

use clap::Parser;

pub use args::Cli;
pub use config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CRITERIA: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Runs the CLI on `args` (program name first) and returns the exit code.
pub fn run(args: Vec<String>) -> i32 {
    let args = match config::expand_config_args(args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return EXIT_USAGE;
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match commands::dispatch(cli.command) {
        Ok(passed) => {
            if passed {
                EXIT_OK
            } else {
                EXIT_CRITERIA
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_USAGE
        }
    }
}

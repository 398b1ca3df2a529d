//! The `treegen` command-line pipeline as a library, so tests can drive
//! commands in-process.

pub mod commands;
pub mod data;
pub mod error;
pub mod settings;
pub mod synth;

use std::ffi::OsString;

use clap::Parser;

pub use commands::{run, Cli, Command};
pub use error::{CliError, Result};

/// Parses `args` (program name first), runs the command and returns the
/// process exit code: 0 success, 1 usage, 2 data, 3 internal.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("treegen: {e}");
            e.code()
        }
    }
}

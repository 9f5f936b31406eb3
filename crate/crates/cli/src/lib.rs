//! Library side of the `spex` command-line tool.

pub mod commands;
pub mod config;
pub mod manifest;

use spex_core::Error;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::Domain(_) => EXIT_CONFIG,
        Error::Data(_) | Error::Io(_) => EXIT_DATA,
        Error::Numerical(_) | Error::DegenerateRow { .. } => EXIT_NUMERICAL,
    }
}

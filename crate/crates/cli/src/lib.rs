//! Command-line workflows over the `bevalign` library.

pub mod bench;
pub mod commands;
pub mod config;

use bevalign::Error;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

/// Process exit code for a failed command.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_CONFIG,
        Error::Io { .. } | Error::Format(_) => EXIT_IO,
        Error::Numerical(_) => EXIT_NUMERICAL,
    }
}

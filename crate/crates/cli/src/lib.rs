//! Command implementations behind the `rakekit` binary.

pub mod bench;
mod error;
pub mod experiments;
pub mod frame;
pub mod run;

pub use error::CliError;

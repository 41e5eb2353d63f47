//! File formats, the comparison harness and the command line for the
//! dataset condensation pipeline in `d2c-core`.

pub mod cli;
pub mod config;
pub mod error;
pub mod format;
pub mod harness;
pub mod pipeline;

pub use config::RunConfig;
pub use error::{CliError, Result};

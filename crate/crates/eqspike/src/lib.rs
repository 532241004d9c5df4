//! File formats, reports and the command-line runner for `eqspike-core`.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod fsio;
pub mod report;
pub mod run;

pub use error::{CliError, CliResult};

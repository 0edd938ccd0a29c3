//! Library surface of the command-line driver: configuration, canonical
//! model and fixtures, file formats, and the end-to-end flow.

pub mod canonical;
pub mod config;
pub mod error;
pub mod fixtures;
pub mod flow;
pub mod modelio;
pub mod report;

pub use config::{ModelSource, RunConfig};
pub use error::{CliError, CliResult};

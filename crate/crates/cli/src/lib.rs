//! Command-line front end: run configuration, manifests and the stage
//! pipeline behind each `demoner` subcommand.

pub mod config;
pub mod error;
pub mod manifest;
pub mod pipeline;

pub use config::{Overrides, RunConfig};
pub use error::CliError;
pub use manifest::Manifest;

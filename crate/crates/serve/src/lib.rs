//! Command line and HTTP front end for the `tinylora` core library.

pub mod cli;
pub mod config;
pub mod error;
pub mod http;
pub mod registry;

pub use error::{CliError, CliResult};
pub use registry::ModelRegistry;

//! Pipeline runner behind the `coordfuse` binary.

pub mod config;
pub mod error;
pub mod gradsuite;
pub mod run;
pub mod stages;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
pub use run::{create_run_dir, execute, rerun, Command};

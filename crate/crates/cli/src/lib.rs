//! Command-line surface: experiment configs, checkpoints and the
//! count-params, train, invert, edit and adapt commands.

pub mod commands;
pub mod config;
pub mod error;
pub mod imageio;
pub mod stats;

pub use config::ExperimentConfig;
pub use error::CliError;

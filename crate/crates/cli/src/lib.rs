//! Experiment runner behind the `mgdeflate` binary: a sectioned TOML
//! configuration, a seed splitter and one function per verb. Every run
//! writes its resolved configuration, CSV outputs and a hashed MANIFEST into
//! the output directory. All stages run single-threaded, so reruns with the
//! same configuration give byte-identical files.

pub mod config;
pub mod manifest;
pub mod run;
pub mod seeds;

use thiserror::Error;

pub use config::ExperimentConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Numerical(#[from] mgdeflate::Error),

    #[error("io error: {0}")]
    Io(String),

    #[error("{0}")]
    Failed(String),
}

impl CliError {
    /// 2 for configuration problems, 3 for anything that went wrong while
    /// running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            _ => 3,
        }
    }
}

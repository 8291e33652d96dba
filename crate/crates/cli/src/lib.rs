//! Batch front end: configuration, CSV ingestion, fitting, path export and benchmarking.

pub mod commands;
pub mod config;
pub mod data;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("optimization failed: {0}")]
    Optimization(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Optimization(_) => 4,
            CliError::Io(_) => 1,
        }
    }
}

// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;

/// CLI failure, split by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad config file, flag, or missing input artifact. Exit code 2.
    #[error("config error: {0}")]
    Config(String),
    /// Failure while running the pipeline or the judge. Exit code 3.
    #[error(transparent)]
    Runtime(#[from] headsteer::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) => 2,
            Self::Runtime(_) => 3,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Self::Config(msg.into())
    }

    /// A required input file produced by an earlier command is absent.
    pub fn missing_input(path: &Path, producer: &str) -> Self {
        Self::Config(format!(
            "{} does not exist; run `headsteer {producer}` first",
            path.display()
        ))
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

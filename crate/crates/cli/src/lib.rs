//! Library side of the `kinwealth` command: configuration, bundle writers and
//! the subcommand implementations, exposed so tests can drive them in-process.

// `!(a > b)` guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod commands;
pub mod config;
pub mod output;

use thiserror::Error;

pub use config::{RunConfig, Resolved};

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration or parameters; exit code 2.
    #[error("{0}")]
    Config(String),
    /// Unreadable or inconsistent input files; exit code 2.
    #[error("{0}")]
    Input(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Sim(#[from] kinwealth_core::SimError),
    #[error(transparent)]
    Fp(#[from] kinwealth_core::FpError),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Input(_) => 2,
            _ => 1,
        }
    }

    pub(crate) fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
        let context = context.into();
        move |source| CliError::Io { context, source }
    }
}

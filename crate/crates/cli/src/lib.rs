//! Command-line plumbing for the `gap` binary: strict run configs, run
//! manifests, one function per verb and the end-to-end `reproduce`
//! pipeline with its acceptance checks.

pub mod commands;
pub mod config;
pub mod criteria;
pub mod manifest;
pub mod reproduce;

use std::path::PathBuf;

/// Environment variable naming the default data root.
pub const DATA_DIR_VAR: &str = "GAP_DATA_DIR";

/// Process exit codes.
pub mod exit {
    pub const OK: u8 = 0;
    pub const ACCEPTANCE: u8 = 1;
    pub const USAGE: u8 = 2;
    pub const INTERNAL: u8 = 3;
}

/// Why a command did not succeed.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags or config; exit 2.
    Usage(String),
    /// Everything ran but an acceptance check did not hold; exit 1.
    Acceptance(String),
    /// Anything else; exit 3.
    Internal(anyhow::Error),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => exit::USAGE,
            Failure::Acceptance(_) => exit::ACCEPTANCE,
            Failure::Internal(_) => exit::INTERNAL,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage error: {m}"),
            Failure::Acceptance(m) => write!(f, "acceptance failure: {m}"),
            Failure::Internal(e) => write!(f, "error: {e:#}"),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Internal(e)
    }
}

impl From<gap_core::GapError> for Failure {
    fn from(e: gap_core::GapError) -> Self {
        Failure::Internal(e.into())
    }
}

/// `$GAP_DATA_DIR`, or `gap-data` under the working directory.
pub fn data_root() -> PathBuf {
    std::env::var_os(DATA_DIR_VAR)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("gap-data"))
}

//! Batch drivers behind the `datareg` binary.
//!
//! Each subcommand has a library entry point so that tests can run it
//! without spawning a process:
//! - [`train`]: training runs on the synthetic two-distribution task.
//! - [`bench`]: metered scoring costs against their closed forms.
//! - [`simulate`]: Monte-Carlo bias/variance tables and regime sweeps.
//! - [`verify`]: invariant suites with a pass/fail report.
//! - [`case_study`]: per-layer score magnitude and rank agreement.
//! - [`fixtures`]: regeneration and checking of the fixture manifest.
//!
//! Reports never contain timestamps; every number is a function of the
//! configuration and its seed.

pub mod bench;
pub mod case_study;
pub mod config;
pub mod fixtures;
pub mod report;
pub mod simulate;
pub mod task;
pub mod train;
pub mod verify;

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Core(#[from] datareg::Error),
    #[error(transparent)]
    Sim(#[from] datareg_sim::SimError),
    /// A check ran and did not hold.
    #[error("failed: {0}")]
    Failed(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    /// An assertion, check or numeric step failed.
    pub const FAILURE: i32 = 1;
    /// The configuration could not be read or did not validate.
    pub const CONFIG: i32 = 2;
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io { .. } | CliError::Json(_) => exit::CONFIG,
            CliError::Core(datareg::Error::Config(_)) => exit::CONFIG,
            CliError::Sim(datareg_sim::SimError::Spec(_) | datareg_sim::SimError::Rule(_)) => exit::CONFIG,
            CliError::Core(_) | CliError::Sim(_) | CliError::Failed(_) => exit::FAILURE,
        }
    }
}

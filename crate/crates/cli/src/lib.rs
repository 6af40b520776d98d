//! Stage-oriented command-line front end. Each stage reads and writes
//! artifacts in one run directory, tracked by a hashed manifest.
//!
//! Exit codes: 0 success, 1 other failure, 2 invalid config or usage,
//! 3 training failure, 4 missing, tampered or mismatched artifact.

pub mod commands;
pub mod manifest;

use niff_core::NiffError;
use thiserror::Error;

pub use commands::{run_cli, Cli, Command, Scale, VariantName};
pub use manifest::{RunManifest, Workspace};

pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_TRAINING: i32 = 3;
pub const EXIT_ARTIFACT: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] NiffError),
    #[error("artifact error: {0}")]
    Artifact(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Core(NiffError::Config { .. }) => EXIT_CONFIG,
            CliError::Core(NiffError::Training(_) | NiffError::Diverged { .. }) => EXIT_TRAINING,
            CliError::Artifact(_) | CliError::Core(NiffError::Format { .. } | NiffError::Version { .. }) => EXIT_ARTIFACT,
            _ => EXIT_OTHER,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_are_stable() {
        let cfg = CliError::Core(NiffError::Config {
            field: "x".into(),
            reason: "y".into(),
        });
        assert_eq!(cfg.exit_code(), 2);
        assert_eq!(CliError::Core(NiffError::Training("t".into())).exit_code(), 3);
        let div = CliError::Core(NiffError::Diverged {
            iteration: 3,
            last_good: Some(2),
        });
        assert_eq!(div.exit_code(), 3);
        assert_eq!(CliError::Artifact("a".into()).exit_code(), 4);
        let ver = CliError::Core(NiffError::Version {
            kind: "k",
            expected: 1,
            found: 2,
        });
        assert_eq!(ver.exit_code(), 4);
        assert_eq!(CliError::Core(NiffError::Contract("c".into())).exit_code(), 1);
    }
}

//! Configuration, orchestration and artifact output for the `fluxsense`
//! command-line tool.

// `!(x > 0.0)` is used on purpose so NaN inputs are rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod header;
pub mod records;

pub use commands::{cmd_analyze, cmd_pattern, cmd_sense, cmd_verify, SenseOptions, VerifyReport};
pub use config::{ExperimentSpec, Overrides};

/// Failure classes, mapped to process exit codes.
#[derive(Debug, thiserror::Error)]
pub enum CmdError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
    #[error("{0}")]
    Verification(String),
}

impl CmdError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CmdError::Validation(_) => 1,
            CmdError::Runtime(_) => 2,
            CmdError::Verification(_) => 3,
        }
    }
}

impl From<fluxsense::Error> for CmdError {
    fn from(e: fluxsense::Error) -> Self {
        use fluxsense::Error as E;
        match e {
            E::Range { .. }
            | E::DegenerateModel(_)
            | E::InvalidConfig(_)
            | E::QubitIndex { .. }
            | E::EngineCap { .. }
            | E::UndefinedVariance(_)
            | E::ScalingInput(_) => CmdError::Validation(e.to_string()),
            E::Integrator(_)
            | E::Interrupted(_)
            | E::ResumeMismatch(_)
            | E::Records { .. }
            | E::Io(_)
            | E::Json(_) => CmdError::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CmdError {
    fn from(e: std::io::Error) -> Self {
        CmdError::Runtime(e.to_string())
    }
}

//! Library side of the `nsreg` command-line tool: run configuration,
//! command implementations and the multi-seed evaluation protocol.

mod commands;
mod config;
mod protocol;

pub use commands::{cmd_eval, cmd_gradcheck, cmd_sweep_alpha, cmd_synth, cmd_train, GradcheckReport, SweepRow};
pub use config::RunConfig;
pub use protocol::{run_protocol, thread_pool, train_and_evaluate, RunRecord};

use nsreg::Error;

/// Exit status for success.
pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_VERIFICATION: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Data(Error),
    #[error("verification failed: {0}")]
    Verification(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Data(_) => EXIT_DATA,
            CliError::Verification(_) => EXIT_VERIFICATION,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(msg) => CliError::Config(msg),
            other => CliError::Data(other),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(Error::Io(e))
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

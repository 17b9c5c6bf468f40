//! Experiment harness: data generation, training, evaluation and
//! verification commands shared by the `delib` binary and its tests.

pub mod checkpoint;
pub mod commands;
pub mod config;

use std::fmt;

use delib_core::error::Error;

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_NUMERIC: u8 = 2;
pub const EXIT_VERIFY: u8 = 3;

/// A command failure with the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Failure { code: EXIT_USAGE, message: message.into() }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Failure { code: EXIT_NUMERIC, message: message.into() }
    }

    pub fn verification(message: impl Into<String>) -> Self {
        Failure { code: EXIT_VERIFY, message: message.into() }
    }

    pub fn context(self, what: impl fmt::Display) -> Self {
        Failure { code: self.code, message: format!("{what}: {}", self.message) }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Failure {}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Domain { .. } => EXIT_NUMERIC,
            Error::VerificationInvalid(_) => EXIT_VERIFY,
            _ => EXIT_USAGE,
        };
        Failure { code, message: e.to_string() }
    }
}

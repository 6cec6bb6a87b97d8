//! Process exit codes and the error type that carries them.

use std::fmt;

use moctefuse::Error;

pub const SUCCESS: u8 = 0;
pub const VERIFICATION: u8 = 1;
pub const INPUT: u8 = 2;
pub const CHECKPOINT: u8 = 3;
pub const NUMERICAL: u8 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn input(message: impl Into<String>) -> Self {
        Self::new(INPUT, message)
    }

    pub fn checkpoint(message: impl Into<String>) -> Self {
        Self::new(CHECKPOINT, message)
    }

    /// Any library error, reported as bad input unless its kind says
    /// otherwise.
    pub fn from_input(e: Error) -> Self {
        e.into()
    }

    /// Library error raised while reading or matching a checkpoint.
    pub fn from_checkpoint(e: Error) -> Self {
        match e {
            Error::Io { .. } | Error::Json(_) | Error::Contract(_) | Error::Dimension { .. } => {
                Self::checkpoint(e.to_string())
            }
            other => other.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Verification { .. } => VERIFICATION,
            Error::Checkpoint(_) => CHECKPOINT,
            Error::NumericalAbort { .. } | Error::NonFiniteGradient { .. } => NUMERICAL,
            _ => INPUT,
        };
        Self::new(code, e.to_string())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

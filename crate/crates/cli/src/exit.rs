//! Failure classes and their process exit codes.

use std::fmt;

use medconv_core::Error;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureKind {
    Config,
    Data,
    Numeric,
}

/// An error tagged with the exit class it should produce.
#[derive(Debug)]
pub struct Failure {
    pub kind: FailureKind,
    pub message: String,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Failure {}

pub fn config_error(message: impl Into<String>) -> anyhow::Error {
    Failure {
        kind: FailureKind::Config,
        message: message.into(),
    }
    .into()
}

pub fn data_error(message: impl Into<String>) -> anyhow::Error {
    Failure {
        kind: FailureKind::Data,
        message: message.into(),
    }
    .into()
}

pub fn numeric_error(message: impl Into<String>) -> anyhow::Error {
    Failure {
        kind: FailureKind::Numeric,
        message: message.into(),
    }
    .into()
}

fn classify_core(e: &Error) -> FailureKind {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::Json(_) => FailureKind::Config,
        Error::NonFinite(_) | Error::Tensor(_) => FailureKind::Numeric,
        _ => FailureKind::Data,
    }
}

/// Walks the cause chain for the first classified error; unclassified
/// failures exit with 1.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        let kind = if let Some(f) = cause.downcast_ref::<Failure>() {
            f.kind
        } else if let Some(e) = cause.downcast_ref::<Error>() {
            classify_core(e)
        } else {
            continue;
        };
        return match kind {
            FailureKind::Config => EXIT_CONFIG,
            FailureKind::Data => EXIT_DATA,
            FailureKind::Numeric => EXIT_NUMERIC,
        };
    }
    1
}

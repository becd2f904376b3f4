use std::fmt;

use ifss_core::Error;

pub const SUCCESS: i32 = 0;
pub const USAGE: i32 = 1;
pub const DATA: i32 = 2;
pub const DIVERGENCE: i32 = 3;
pub const PROTOCOL: i32 = 4;

/// A bad flag, config key or argument combination.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// A missing or malformed input file or directory.
#[derive(Debug)]
pub struct DataError(pub String);

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for DataError {}

fn core_code(e: &Error) -> i32 {
    match e {
        Error::Diverged { .. } | Error::NumericBlowup { .. } => DIVERGENCE,
        Error::ProtocolViolation { .. } => PROTOCOL,
        Error::InvalidConfig(_) | Error::IndivisibleCatalog { .. } => USAGE,
        _ => DATA,
    }
}

/// Exit status for an error, from the first classified cause in its chain.
pub fn code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return core_code(e);
        }
        if cause.is::<UsageError>() {
            return USAGE;
        }
        if cause.is::<DataError>() || cause.is::<std::io::Error>() {
            return DATA;
        }
    }
    USAGE
}

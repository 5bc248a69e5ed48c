use std::fmt;
use std::process::ExitCode;

pub const EXIT_CLEAN: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_BACKDOORED: u8 = 3;

/// A command failure with its exit status.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(String),
}

impl Failure {
    pub fn code(&self) -> ExitCode {
        ExitCode::from(match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Data(_) => EXIT_DATA,
        })
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage error: {m}"),
            Failure::Data(m) => write!(f, "data error: {m}"),
        }
    }
}

impl From<dfbscan::Error> for Failure {
    fn from(e: dfbscan::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

pub fn data(context: impl fmt::Display, e: dfbscan::Error) -> Failure {
    Failure::Data(format!("{context}: {e}"))
}

use std::fmt;
use std::io;

use mtd::MtdError;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Core(MtdError),
}

impl CliError {
    /// 2 configuration, 3 numeric divergence, 4 I/O or file format.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) => match e {
                MtdError::Config(_)
                | MtdError::Packing { .. }
                | MtdError::Shape(_)
                | MtdError::Bounds(_)
                | MtdError::Undefined(_) => 2,
                MtdError::Divergence { .. } | MtdError::Numeric(_) => 3,
                MtdError::Format(_) | MtdError::Length { .. } | MtdError::Io(_) => 4,
            },
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "configuration error: {msg}"),
            CliError::Core(e) => e.fmt(f),
        }
    }
}

impl std::error::Error for CliError {}

impl From<MtdError> for CliError {
    fn from(e: MtdError) -> Self {
        CliError::Core(e)
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Core(MtdError::Io(e))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        if e.is_io() {
            CliError::Core(MtdError::Io(e.into()))
        } else {
            CliError::Core(MtdError::Format(e.to_string()))
        }
    }
}

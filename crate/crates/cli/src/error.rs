use std::fmt;
use std::path::Path;

use mome::MomeError;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Core(MomeError),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Data(format!("{}: {e}", path.display()))
    }

    /// 2 for configuration and argument errors, 3 for data and I/O, 4 for
    /// numeric failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Core(e) => match e {
                MomeError::Config(_) | MomeError::Invalid(_) => 2,
                MomeError::Numeric(_) => 4,
                MomeError::Data(_)
                | MomeError::Parse { .. }
                | MomeError::Io(_)
                | MomeError::Shape { .. }
                | MomeError::Undefined(_) => 3,
            },
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Core(e) => e.fmt(f),
        }
    }
}

impl From<MomeError> for CliError {
    fn from(e: MomeError) -> Self {
        CliError::Core(e)
    }
}

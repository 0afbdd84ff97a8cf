use std::fmt;

/// Command failure, mapped onto the process exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Corrupt(String),
    Lib(fmwc::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Corrupt(_) => 4,
            CliError::Lib(e) if e.is_numeric() => 3,
            CliError::Lib(e) if e.is_corrupt() => 4,
            CliError::Lib(fmwc::Error::Io(_)) => 1,
            CliError::Lib(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Corrupt(m) => f.write_str(m),
            CliError::Lib(e) => write!(f, "{e}"),
        }
    }
}

impl From<fmwc::Error> for CliError {
    fn from(e: fmwc::Error) -> Self {
        CliError::Lib(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Lib(fmwc::Error::Io(e))
    }
}

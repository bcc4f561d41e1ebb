//! Exit-code classification: 1 usage/config, 2 runtime/data, 3 threshold.

use std::fmt;

use prospect_core::Error as CoreError;

#[derive(Debug)]
pub enum CmdError {
    Usage(String),
    Runtime(CoreError),
    /// An evaluate suite ran but missed a configured threshold.
    Threshold(String),
}

impl CmdError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CmdError::Usage(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CmdError::Usage(_) => 1,
            CmdError::Runtime(_) => 2,
            CmdError::Threshold(_) => 3,
        }
    }
}

impl fmt::Display for CmdError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CmdError::Usage(m) => write!(f, "{m}"),
            CmdError::Runtime(e) => write!(f, "{e}"),
            CmdError::Threshold(m) => write!(f, "{m}"),
        }
    }
}

impl From<std::io::Error> for CmdError {
    fn from(e: std::io::Error) -> Self {
        CmdError::Runtime(CoreError::Io(e))
    }
}

impl From<CoreError> for CmdError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Config { .. }
            | CoreError::InvalidArg(_)
            | CoreError::UnknownLabel { .. }
            | CoreError::PlanSyntax { .. }
            | CoreError::PlanOverlap { .. } => {
                CmdError::Usage(e.to_string())
            }
            other => CmdError::Runtime(other),
        }
    }
}

pub type CmdResult = Result<(), CmdError>;

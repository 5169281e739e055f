use std::fmt;

/// Failure classes with fixed process exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Invalid or incomplete configuration (exit 2).
    Config(String),
    /// A simulation invariant or result self-consistency check failed
    /// (exit 3).
    Invariant(String),
    /// Filesystem trouble (exit 4).
    Io(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Invariant(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "configuration: {msg}"),
            CliError::Invariant(msg) => write!(f, "invariant: {msg}"),
            CliError::Io(msg) => write!(f, "io: {msg}"),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<triport_core::noise::NoiseError> for CliError {
    fn from(e: triport_core::noise::NoiseError) -> Self {
        match e {
            triport_core::noise::NoiseError::InvalidParam(msg) => CliError::Config(msg),
            other => CliError::Invariant(other.to_string()),
        }
    }
}

impl From<triport_core::protocol::ProtocolError> for CliError {
    fn from(e: triport_core::protocol::ProtocolError) -> Self {
        CliError::Invariant(e.to_string())
    }
}

impl From<triport_core::elements::ElementError> for CliError {
    fn from(e: triport_core::elements::ElementError) -> Self {
        CliError::Invariant(e.to_string())
    }
}

impl From<triport_core::analysis::AnalysisError> for CliError {
    fn from(e: triport_core::analysis::AnalysisError) -> Self {
        CliError::Invariant(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Invariant(format!("serialization: {e}"))
    }
}

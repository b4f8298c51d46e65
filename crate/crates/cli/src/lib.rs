//! Command implementations and configuration for the `deepnorm` binary.

pub mod commands;
pub mod config;

/// How a command failed, mapped onto the process exit code.
#[derive(Debug)]
pub enum Failure {
    Config(String),
    Check(String),
    Runtime(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Check(_) => 3,
            Failure::Runtime(_) => 4,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "config error: {m}"),
            Failure::Check(m) => write!(f, "check failed: {m}"),
            Failure::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<deepnorm::Error> for Failure {
    fn from(e: deepnorm::Error) -> Self {
        match e {
            deepnorm::Error::Config { .. } => Failure::Config(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

use alloc::string::String;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

/// Contract violations of the residency state machine.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PolicyError {
    UnknownPosition(usize),
    AlreadyFrozen(usize),
    NotFrozen(usize),
    Protected(usize),
    ZeroDuration(usize),
    /// Detections must be recorded at strictly increasing steps.
    StaleDetection {
        position: usize,
        step: u64,
        last: u64,
    },
}

impl fmt::Display for PolicyError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::UnknownPosition(p) => write!(f, "no token at position {p}"),
            Self::AlreadyFrozen(p) => write!(f, "token {p} is already frozen"),
            Self::NotFrozen(p) => write!(f, "token {p} is not frozen"),
            Self::Protected(p) => write!(f, "token {p} is inside the protected window"),
            Self::ZeroDuration(p) => write!(f, "freeze duration for token {p} must be at least 1"),
            Self::StaleDetection {
                position,
                step,
                last,
            } => write!(
                f,
                "detection for token {position} at step {step} does not follow step {last}"
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    Policy(PolicyError),
    /// Caller-supplied vectors or ids have the wrong shape or range.
    Input(String),
    /// A configuration value is out of range. Carries the offending key.
    Config {
        key: &'static str,
        reason: String,
    },
    /// A score trace is malformed.
    Trace {
        step: u64,
        position: Option<usize>,
        reason: String,
    },
    /// The frozen tier failed to store or return a KV entry.
    Tier(String),
    /// An internal invariant did not hold.
    Invariant(String),
}

impl Error {
    pub(crate) fn config(key: &'static str, reason: impl Into<String>) -> Self {
        Self::Config {
            key,
            reason: reason.into(),
        }
    }

    /// True for errors caused by the engine itself rather than its inputs.
    pub fn is_internal(&self) -> bool {
        matches!(self, Self::Invariant(_) | Self::Policy(_) | Self::Tier(_))
    }
}

impl From<PolicyError> for Error {
    fn from(e: PolicyError) -> Self {
        Self::Policy(e)
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Policy(e) => write!(f, "policy error: {e}"),
            Self::Input(msg) => write!(f, "input error: {msg}"),
            Self::Config { key, reason } => write!(f, "invalid {key}: {reason}"),
            Self::Trace {
                step,
                position: Some(p),
                reason,
            } => write!(f, "trace step {step}, position {p}: {reason}"),
            Self::Trace {
                step,
                position: None,
                reason,
            } => write!(f, "trace step {step}: {reason}"),
            Self::Tier(msg) => write!(f, "frozen tier error: {msg}"),
            Self::Invariant(msg) => write!(f, "invariant violated: {msg}"),
        }
    }
}

impl core::error::Error for Error {}

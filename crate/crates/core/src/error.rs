use thiserror::Error;

use crate::addressing::NetAddress;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AddressError {
    #[error("address width {0} outside 1..=16")]
    BadWidth(u8),
    #[error("value {bits:#b} does not fit in {width} bits")]
    ValueTooWide { bits: u32, width: u8 },
    #[error("sibling level {level} out of range for {width}-bit addresses")]
    LevelOutOfRange { level: u8, width: u8 },
    #[error("address {0} compared with itself has no sibling level")]
    SameAddress(NetAddress),
    #[error("cannot parse address {0:?}")]
    Parse(String),
}

/// Scenario validation failure. `key` names the offending scenario key.
#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{key}: {reason}")]
    Invalid { key: String, reason: String },
    #[error("scenario parse error: {0}")]
    Parse(String),
    #[error("cannot read scenario {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl ScenarioError {
    pub fn invalid(key: &str, reason: impl Into<String>) -> Self {
        ScenarioError::Invalid {
            key: key.to_string(),
            reason: reason.into(),
        }
    }

    /// The scenario key at fault, when one is known.
    pub fn key(&self) -> Option<&str> {
        match self {
            ScenarioError::Invalid { key, .. } => Some(key),
            _ => None,
        }
    }
}

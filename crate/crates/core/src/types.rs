use std::fmt;

use serde::{Deserialize, Serialize};

/// Identifier of a market participant.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AgentId(pub String);

impl AgentId {
    pub fn new(id: impl Into<String>) -> Self {
        AgentId(id.into())
    }

    /// The utility counterparty that absorbs residual orders.
    pub fn dso() -> Self {
        AgentId(DSO_ID.to_string())
    }

    pub fn is_dso(&self) -> bool {
        self.0 == DSO_ID
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

pub const DSO_ID: &str = "DSO";

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for AgentId {
    fn from(s: &str) -> Self {
        AgentId(s.to_string())
    }
}

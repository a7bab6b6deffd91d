//! Instances, nodes and the generator, store, worker and manager tiers.

mod events;
mod generator;
mod keeper;
mod manager;
mod worker;

use std::collections::BTreeMap;
use std::fmt;
use std::net::SocketAddr;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::store::StoreError;

pub use events::{BusEvent, EventBus, EventCategory, Subscription};
pub use generator::{dgt_evaluate, EvalOptions, Evaluation, StageRecord};
pub use keeper::{GmtInfoKeeper, Registry, Relations};
pub use manager::{
    EvalRecord, EvalStatus, Fault, Gmt, GmtOptions, DEFAULT_INSTANCE, InstanceTopology, NodeAction, RecoveryPlan, Relation, RelationKind,
    ReplacementPlan, TierMetrics,
};
pub use worker::{dwt_process_loop, WorkerControl};

/// Keys a tier configuration may carry.
pub mod keys {
    /// Write-ahead log for a store tier. Without it the store is in memory.
    pub const DST_WAL_PATH: &str = "dst.wal.path";
    /// Address a store tier's transport agent listens on, e.g. `127.0.0.1:0`.
    pub const DST_LISTEN: &str = "dst.listen";
    /// `local` or `tcp`: how a generator or worker reaches its store.
    pub const TRANSPORT: &str = "transport";
    /// Codec a TCP generator or worker starts on: `TcpText` or `TcpBinary`.
    pub const PROTOCOL: &str = "transport.protocol";
    /// Comma separated procedure names a worker tier supports.
    pub const DWT_PROCEDURES: &str = "dwt.procedures";
    /// Recognized but unused.
    pub const MAX_DEMANDS: &str = "max.demands";
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TierError {
    #[error("unknown instance `{0}`")]
    UnknownInstance(String),
    #[error("bad address `{0}`")]
    BadAddress(String),
    #[error("bad color `{0}`, expected #rrggbb")]
    BadColor(String),
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("unknown tier `{0}`")]
    UnknownTier(String),
    #[error("unknown evaluation `{0}`")]
    UnknownEvaluation(String),
    #[error("node `{0}` is not started")]
    NodeNotStarted(String),
    #[error("no store tier available")]
    NoDstAvailable,
    #[error("cannot {action} node `{node}` while {from}")]
    IllegalTransition { node: String, from: NodeStatus, action: String },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("tier `{tier}` is a {kind}, expected {expected}")]
    WrongKind { tier: String, kind: TierKind, expected: TierKind },
    #[error("no live node can take over from `{0}`")]
    NoReplacementNode(String),
    #[error("recovery of node `{0}` failed")]
    RecoveryFailed(String),
    #[error("stage `{stage}` timed out")]
    EvaluationTimeout { stage: String },
    #[error("stage `{stage}` failed: {message}")]
    StageFailed { stage: String, message: String },
    #[error("evaluation cancelled")]
    Cancelled,
    #[error("store unavailable: {0}")]
    StoreUnavailable(String),
    #[error("integrity error: {0}")]
    Integrity(String),
}

impl TierError {
    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            TierError::UnknownInstance(_) => "UnknownInstance",
            TierError::BadAddress(_) => "BadAddress",
            TierError::BadColor(_) => "BadColor",
            TierError::UnknownNode(_) => "UnknownNode",
            TierError::UnknownTier(_) => "UnknownTier",
            TierError::UnknownEvaluation(_) => "UnknownEvaluation",
            TierError::NodeNotStarted(_) => "NodeNotStarted",
            TierError::NoDstAvailable => "NoDstAvailable",
            TierError::IllegalTransition { .. } => "IllegalTransition",
            TierError::InvalidConfig(_) => "InvalidConfig",
            TierError::WrongKind { .. } => "WrongKind",
            TierError::NoReplacementNode(_) => "NoReplacementNode",
            TierError::RecoveryFailed(_) => "RecoveryFailed",
            TierError::EvaluationTimeout { .. } => "EvaluationTimeout",
            TierError::StageFailed { .. } => "StageFailed",
            TierError::Cancelled => "Cancelled",
            TierError::StoreUnavailable(_) => "StoreUnavailable",
            TierError::Integrity(_) => "IntegrityError",
        }
    }
}

impl From<StoreError> for TierError {
    fn from(e: StoreError) -> Self {
        TierError::StoreUnavailable(e.to_string())
    }
}

/// Tier settings. Cloning copies every entry; clones share nothing.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Configuration {
    settings: BTreeMap<String, String>,
}

impl Configuration {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pairs<I, K, V>(pairs: I) -> Result<Self, TierError>
    where
        I: IntoIterator<Item = (K, V)>,
        K: Into<String>,
        V: Into<String>,
    {
        let mut c = Self::new();
        for (k, v) in pairs {
            c.set(k, v)?;
        }
        Ok(c)
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Into<String>) -> Result<(), TierError> {
        let key = key.into();
        if key.trim().is_empty() {
            return Err(TierError::InvalidConfig("empty key".into()));
        }
        self.settings.insert(key, value.into());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.settings.get(key).map(String::as_str)
    }

    pub fn remove(&mut self, key: &str) -> Option<String> {
        self.settings.remove(key)
    }

    pub fn len(&self) -> usize {
        self.settings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.settings.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.settings.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn validate(&self) -> Result<(), TierError> {
        if self.settings.keys().any(|k| k.trim().is_empty()) {
            return Err(TierError::InvalidConfig("empty key".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GipsyInstance {
    pub instance_id: String,
    pub instance_name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum NodeStatus {
    Registered,
    Started,
    Stopped,
    Suspected,
    Dead,
}

impl fmt::Display for NodeStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeRegistration {
    pub node_id: String,
    pub node_name: String,
    pub address: String,
    pub color: String,
    pub registered_at: u64,
    pub status: NodeStatus,
    pub instance_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TierKind {
    #[serde(rename = "DGT")]
    Dgt,
    #[serde(rename = "DST")]
    Dst,
    #[serde(rename = "DWT")]
    Dwt,
    #[serde(rename = "GMT")]
    Gmt,
}

impl fmt::Display for TierKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TierKind::Dgt => "DGT",
            TierKind::Dst => "DST",
            TierKind::Dwt => "DWT",
            TierKind::Gmt => "GMT",
        })
    }
}

impl FromStr for TierKind {
    type Err = TierError;

    fn from_str(s: &str) -> Result<Self, TierError> {
        match s.to_ascii_uppercase().as_str() {
            "DGT" => Ok(TierKind::Dgt),
            "DST" => Ok(TierKind::Dst),
            "DWT" => Ok(TierKind::Dwt),
            "GMT" => Ok(TierKind::Gmt),
            _ => Err(TierError::InvalidConfig(format!("unknown tier kind `{s}`"))),
        }
    }
}

/// Whether a tier is doing work.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TierState {
    Running,
    /// Its node is stopped or suspected.
    Suspended,
    /// A generator or worker whose store went away with no replacement.
    NoDstAvailable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TierRegistration {
    pub tier_id: String,
    pub kind: TierKind,
    pub node_id: String,
    pub instance_count: u32,
    pub config: Configuration,
    pub state: TierState,
}

/// Checks `#rrggbb` with lowercase hex digits.
pub fn valid_color(color: &str) -> bool {
    let b = color.as_bytes();
    b.len() == 7 && b[0] == b'#' && b[1..].iter().all(|c| c.is_ascii_digit() || (b'a'..=b'f').contains(c))
}

/// Accepts `host:port` where the port is numeric and the host non-empty.
pub fn valid_address(address: &str) -> bool {
    if address.parse::<SocketAddr>().is_ok() {
        return true;
    }
    match address.rsplit_once(':') {
        Some((host, port)) => {
            !host.is_empty()
                && port.parse::<u16>().is_ok()
                && host.chars().all(|c| c.is_ascii_alphanumeric() || c == '.' || c == '-')
        }
        None => false,
    }
}

//! Demand migration between tiers.
//!
//! A transport agent (TA) server fronts a demand store and speaks the framed
//! wire protocol in [`frame`]; clients reach it through an [`Endpoint`].
//! Dispatch retransmits on timeout and relies on the store's signature
//! dedupe, so a demand takes effect once however many copies arrive.

pub mod frame;
pub mod message;
mod client;
mod server;
pub mod sim;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use client::{call_with_retry, dispatch_demand, DispatchReceipt, Endpoint, LinkError, LocalEndpoint, RetryPolicy, TaClient, TcpEndpoint};
pub use frame::{frame_decode, frame_encode, Frame, FrameError, MsgKind};
pub use message::Message;
pub use server::{ta_serve, MessageGate, SecurityVerdict, Session, TaHandler, TaServer, FrameVerdict};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ProtocolId {
    InProc,
    TcpText,
    TcpBinary,
}

impl ProtocolId {
    /// Highest preference first.
    pub const PREFERENCE: [ProtocolId; 3] = [ProtocolId::TcpBinary, ProtocolId::TcpText, ProtocolId::InProc];

    pub fn rank(self) -> usize {
        Self::PREFERENCE.iter().position(|p| *p == self).expect("listed")
    }
}

impl fmt::Display for ProtocolId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProtocolId::InProc => "InProc",
            ProtocolId::TcpText => "TcpText",
            ProtocolId::TcpBinary => "TcpBinary",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    #[error("no common protocol")]
    NoCommonProtocol,
    #[error("endpoint unreachable after {attempts} attempts")]
    Unreachable { attempts: u32 },
    #[error("rejected by peer: {code}: {message}")]
    Rejected { code: String, message: String },
    #[error("unexpected reply: {0}")]
    UnexpectedReply(String),
    #[error(transparent)]
    Frame(#[from] FrameError),
}

/// Picks the most preferred protocol both sides support. `InProc` is only
/// offered by peers sharing a process, so it wins only when nothing else is
/// common.
pub fn negotiate_protocol(local: &BTreeSet<ProtocolId>, remote: &BTreeSet<ProtocolId>) -> Result<ProtocolId, TransportError> {
    ProtocolId::PREFERENCE
        .into_iter()
        .find(|p| local.contains(p) && remote.contains(p))
        .ok_or(TransportError::NoCommonProtocol)
}

pub fn tcp_caps() -> BTreeSet<ProtocolId> {
    [ProtocolId::TcpText, ProtocolId::TcpBinary].into()
}

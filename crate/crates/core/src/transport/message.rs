//! Typed payloads carried inside frames.
//!
//! `TcpText` payloads are canonical JSON, `TcpBinary` payloads are CBOR of
//! the same structures. `Hello` and `Err` payloads are always text so peers
//! can negotiate and report errors before agreeing on a codec.

use std::collections::BTreeSet;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::frame::{FrameError, MsgKind};
use super::ProtocolId;
use crate::demand::{to_canonical_string, Demand, DemandResult, SignatureKey, Value};
use crate::store::{Ack, DepositOutcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DepositDemandMsg {
    pub req: u64,
    pub demand: Demand,
}

/// Lease request, or (with `release` set) a hand-back of a leased demand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WithdrawMsg {
    pub req: u64,
    pub worker_id: String,
    pub lease_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub release: Option<SignatureKey>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DepositResultMsg {
    pub req: u64,
    pub result: DemandResult,
}

/// Warehouse lookup; with no signature it asks for the pending count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LookupMsg {
    pub req: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signature: Option<SignatureKey>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Reply {
    Deposit(DepositOutcome),
    Withdrawn(Option<Demand>),
    Released(bool),
    Result(Ack),
    Found(Option<DemandResult>),
    PendingLen(u64),
    Hello { protocol: ProtocolId, caps: BTreeSet<ProtocolId> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AckMsg {
    pub req: u64,
    pub reply: Reply,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HelloMsg {
    pub req: u64,
    pub peer: String,
    pub caps: BTreeSet<ProtocolId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preferred: Option<ProtocolId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrMsg {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub req: Option<u64>,
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventMsg {
    pub name: String,
    pub subject: String,
    pub at: u64,
    #[serde(default)]
    pub attributes: std::collections::BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    DepositDemand(DepositDemandMsg),
    Withdraw(WithdrawMsg),
    DepositResult(DepositResultMsg),
    Lookup(LookupMsg),
    Ack(AckMsg),
    Hello(HelloMsg),
    Err(ErrMsg),
    Event(EventMsg),
}

fn text<T: Serialize>(v: &T) -> Result<Vec<u8>, FrameError> {
    to_canonical_string(v)
        .map(String::into_bytes)
        .map_err(|e| FrameError::Schema(MsgKind::Err, e.to_string()))
}

fn encode_with<T: Serialize>(v: &T, protocol: ProtocolId) -> Result<Vec<u8>, FrameError> {
    match protocol {
        ProtocolId::TcpBinary => {
            let mut out = Vec::new();
            ciborium::into_writer(v, &mut out).map_err(|e| FrameError::Schema(MsgKind::Err, e.to_string()))?;
            Ok(out)
        }
        ProtocolId::TcpText | ProtocolId::InProc => text(v),
    }
}

fn decode_with<T: DeserializeOwned>(kind: MsgKind, bytes: &[u8], protocol: ProtocolId) -> Result<T, FrameError> {
    let schema = |e: String| FrameError::Schema(kind, e);
    match protocol {
        ProtocolId::TcpBinary => ciborium::from_reader(bytes).map_err(|e| schema(e.to_string())),
        ProtocolId::TcpText | ProtocolId::InProc => serde_json::from_slice(bytes).map_err(|e| schema(e.to_string())),
    }
}

impl Message {
    pub fn kind(&self) -> MsgKind {
        match self {
            Message::DepositDemand(_) => MsgKind::DepositDemand,
            Message::Withdraw(_) => MsgKind::Withdraw,
            Message::DepositResult(_) => MsgKind::DepositResult,
            Message::Lookup(_) => MsgKind::Lookup,
            Message::Ack(_) => MsgKind::Ack,
            Message::Hello(_) => MsgKind::Hello,
            Message::Err(_) => MsgKind::Err,
            Message::Event(_) => MsgKind::Event,
        }
    }

    /// Request id for correlating replies; `None` for unsolicited messages.
    pub fn req(&self) -> Option<u64> {
        match self {
            Message::DepositDemand(m) => Some(m.req),
            Message::Withdraw(m) => Some(m.req),
            Message::DepositResult(m) => Some(m.req),
            Message::Lookup(m) => Some(m.req),
            Message::Ack(m) => Some(m.req),
            Message::Hello(m) => Some(m.req),
            Message::Err(m) => m.req,
            Message::Event(_) => None,
        }
    }

    pub fn encode_payload(&self, protocol: ProtocolId) -> Result<Vec<u8>, FrameError> {
        match self {
            Message::DepositDemand(m) => encode_with(m, protocol),
            Message::Withdraw(m) => encode_with(m, protocol),
            Message::DepositResult(m) => encode_with(m, protocol),
            Message::Lookup(m) => encode_with(m, protocol),
            Message::Ack(m) => encode_with(m, protocol),
            Message::Event(m) => encode_with(m, protocol),
            Message::Hello(m) => text(m),
            Message::Err(m) => text(m),
        }
    }

    pub fn decode_payload(kind: MsgKind, payload: &[u8], protocol: ProtocolId) -> Result<Message, FrameError> {
        Ok(match kind {
            MsgKind::DepositDemand => {
                let m: DepositDemandMsg = decode_with(kind, payload, protocol)?;
                m.demand.validate().map_err(|e| FrameError::Schema(kind, e.to_string()))?;
                Message::DepositDemand(m)
            }
            MsgKind::Withdraw => Message::Withdraw(decode_with(kind, payload, protocol)?),
            MsgKind::DepositResult => Message::DepositResult(decode_with(kind, payload, protocol)?),
            MsgKind::Lookup => Message::Lookup(decode_with(kind, payload, protocol)?),
            MsgKind::Ack => Message::Ack(decode_with(kind, payload, protocol)?),
            MsgKind::Event => Message::Event(decode_with(kind, payload, protocol)?),
            MsgKind::Hello => Message::Hello(decode_with(kind, payload, ProtocolId::TcpText)?),
            MsgKind::Err => Message::Err(decode_with(kind, payload, ProtocolId::TcpText)?),
        })
    }
}

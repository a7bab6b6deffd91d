//! Client side: endpoints, retransmission and a remote demand space.

use std::collections::BTreeSet;
use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use thiserror::Error;

use super::frame::{frame_decode, frame_encode, parse_header, MsgKind, HEADER_LEN, MAC_LEN};
use super::message::{DepositDemandMsg, DepositResultMsg, HelloMsg, LookupMsg, Message, Reply, WithdrawMsg};
use super::server::{Session, TaHandler};
use super::{tcp_caps, ProtocolId, TransportError};
use crate::demand::{Demand, DemandResult, SignatureKey};
use crate::store::{Ack, DemandSpace, DepositOutcome, StoreError};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LinkError {
    #[error("no reply before the timeout")]
    Timeout,
    #[error("link failure: {0}")]
    Io(String),
}

impl From<io::Error> for LinkError {
    fn from(e: io::Error) -> Self {
        match e.kind() {
            io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => LinkError::Timeout,
            _ => LinkError::Io(e.to_string()),
        }
    }
}

/// A path to a transport agent. `round_trip` sends one request and waits for
/// the reply carrying the same request id.
pub trait Endpoint: Send {
    fn next_req(&mut self) -> u64;
    fn round_trip(&mut self, request: &Message) -> Result<Message, LinkError>;

    /// Codec in use, for endpoints that negotiate one.
    fn protocol(&self) -> Option<ProtocolId> {
        None
    }

    /// Local and remote capability sets once known.
    fn link_caps(&self) -> Option<(BTreeSet<ProtocolId>, BTreeSet<ProtocolId>)> {
        None
    }

    fn switch_protocol(&mut self, _protocol: ProtocolId) -> Result<ProtocolId, LinkError> {
        Err(LinkError::Io("endpoint has a fixed protocol".into()))
    }

    /// Kind and codec of every frame sent so far.
    fn sent_log(&self) -> Vec<(MsgKind, ProtocolId)> {
        Vec::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            initial_backoff: Duration::from_millis(100),
        }
    }
}

impl RetryPolicy {
    /// Delay before attempt `attempt + 1`, doubling each time.
    pub fn backoff(&self, attempt: u32) -> Duration {
        self.initial_backoff * 2u32.saturating_pow(attempt.saturating_sub(1))
    }
}

/// Sends `request`, retransmitting it unchanged on link failures. Returns the
/// reply and the number of attempts used. An `Err` reply is final.
pub fn call_with_retry(
    endpoint: &mut dyn Endpoint,
    request: &Message,
    policy: &RetryPolicy,
) -> Result<(Message, u32), TransportError> {
    let attempts = policy.max_attempts.max(1);
    for attempt in 1..=attempts {
        match endpoint.round_trip(request) {
            Ok(Message::Err(e)) => {
                return Err(TransportError::Rejected {
                    code: e.code,
                    message: e.message,
                })
            }
            Ok(reply) => return Ok((reply, attempt)),
            Err(e) => {
                log::debug!("attempt {attempt} of {:?} failed: {e}", request.kind());
                if attempt < attempts {
                    std::thread::sleep(policy.backoff(attempt));
                }
            }
        }
    }
    Err(TransportError::Unreachable { attempts })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DispatchReceipt {
    pub signature: SignatureKey,
    pub outcome: DepositOutcome,
    pub attempts: u32,
}

/// Deposits `demand` at the remote store. Retransmissions reuse the request
/// id and the store dedupes by signature, so the demand is enqueued at most
/// once.
pub fn dispatch_demand(
    demand: &Demand,
    endpoint: &mut dyn Endpoint,
    policy: &RetryPolicy,
) -> Result<DispatchReceipt, TransportError> {
    let signature = demand
        .signature()
        .map_err(|e| TransportError::Rejected {
            code: "InvalidDemand".into(),
            message: e.to_string(),
        })?;
    let request = Message::DepositDemand(DepositDemandMsg {
        req: endpoint.next_req(),
        demand: demand.clone(),
    });
    match call_with_retry(endpoint, &request, policy)? {
        (Message::Ack(ack), attempts) => match ack.reply {
            Reply::Deposit(outcome) => Ok(DispatchReceipt {
                signature,
                outcome,
                attempts,
            }),
            other => Err(TransportError::UnexpectedReply(format!("{other:?}"))),
        },
        (other, _) => Err(TransportError::UnexpectedReply(format!("{:?}", other.kind()))),
    }
}

/// Co-located transport agent: hands messages straight to the handler with
/// no framing.
pub struct LocalEndpoint {
    handler: Arc<TaHandler>,
    session: Session,
    next: u64,
}

impl LocalEndpoint {
    pub fn new(handler: Arc<TaHandler>, peer: impl Into<String>) -> Self {
        let mut session = Session::new(peer);
        session.protocol = ProtocolId::InProc;
        Self {
            handler,
            session,
            next: 0,
        }
    }
}

impl Endpoint for LocalEndpoint {
    fn next_req(&mut self) -> u64 {
        self.next += 1;
        self.next
    }

    fn round_trip(&mut self, request: &Message) -> Result<Message, LinkError> {
        Ok(self.handler.handle_message(&mut self.session, request.clone()))
    }
}

/// Framed TCP connection to a transport agent. Connects lazily, greets with
/// `Hello` and reconnects after any link failure.
pub struct TcpEndpoint {
    addr: SocketAddr,
    key: Vec<u8>,
    peer: String,
    caps: BTreeSet<ProtocolId>,
    preferred: Option<ProtocolId>,
    timeout: Duration,
    stream: Option<TcpStream>,
    protocol: ProtocolId,
    remote_caps: Option<BTreeSet<ProtocolId>>,
    next: u64,
    sent: Vec<(MsgKind, ProtocolId)>,
}

impl TcpEndpoint {
    pub fn new(addr: SocketAddr, key: impl Into<Vec<u8>>, peer: impl Into<String>) -> Self {
        Self {
            addr,
            key: key.into(),
            peer: peer.into(),
            caps: tcp_caps(),
            preferred: None,
            timeout: Duration::from_secs(2),
            stream: None,
            protocol: ProtocolId::TcpText,
            remote_caps: None,
            next: 0,
            sent: Vec::new(),
        }
    }

    pub fn with_caps(mut self, caps: BTreeSet<ProtocolId>) -> Self {
        self.caps = caps;
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    /// Codec to ask for when greeting the server.
    pub fn with_preferred(mut self, protocol: ProtocolId) -> Self {
        self.preferred = Some(protocol);
        self
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Protocol agreed for the current connection.
    pub fn current_protocol(&self) -> ProtocolId {
        self.protocol
    }

    fn connect(&mut self) -> Result<(), LinkError> {
        if self.stream.is_some() {
            return Ok(());
        }
        let stream = TcpStream::connect_timeout(&self.addr, self.timeout)?;
        stream.set_nodelay(true)?;
        stream.set_read_timeout(Some(self.timeout))?;
        self.stream = Some(stream);
        if let Err(e) = self.hello() {
            self.stream = None;
            return Err(e);
        }
        Ok(())
    }

    fn hello(&mut self) -> Result<(), LinkError> {
        let req = self.next_req();
        let hello = Message::Hello(HelloMsg {
            req,
            peer: self.peer.clone(),
            caps: self.caps.clone(),
            preferred: self.preferred,
        });
        match self.exchange(&hello, ProtocolId::TcpText)? {
            Message::Ack(ack) => match ack.reply {
                Reply::Hello { protocol, caps } => {
                    self.protocol = protocol;
                    self.remote_caps = Some(caps);
                    Ok(())
                }
                other => Err(LinkError::Io(format!("unexpected hello reply {other:?}"))),
            },
            Message::Err(e) => Err(LinkError::Io(format!("{}: {}", e.code, e.message))),
            other => Err(LinkError::Io(format!("unexpected hello reply {:?}", other.kind()))),
        }
    }

    fn read_frame(&mut self) -> Result<Vec<u8>, LinkError> {
        let stream = self.stream.as_mut().ok_or_else(|| LinkError::Io("not connected".into()))?;
        let mut header = [0u8; HEADER_LEN];
        stream.read_exact(&mut header)?;
        let (_, len) = parse_header(&header).map_err(|e| LinkError::Io(e.to_string()))?;
        let mut frame = header.to_vec();
        frame.resize(HEADER_LEN + len + MAC_LEN, 0);
        stream.read_exact(&mut frame[HEADER_LEN..])?;
        Ok(frame)
    }

    fn exchange(&mut self, request: &Message, protocol: ProtocolId) -> Result<Message, LinkError> {
        let kind = request.kind();
        let payload = request.encode_payload(protocol).map_err(|e| LinkError::Io(e.to_string()))?;
        let bytes = frame_encode(kind, &payload, &self.key).map_err(|e| LinkError::Io(e.to_string()))?;
        let stream = self.stream.as_mut().ok_or_else(|| LinkError::Io("not connected".into()))?;
        stream.write_all(&bytes)?;
        self.sent.push((kind, protocol));
        let deadline = Instant::now() + self.timeout;
        loop {
            if Instant::now() >= deadline {
                return Err(LinkError::Timeout);
            }
            let frame = self.read_frame()?;
            let frame = frame_decode(&frame, &self.key).map_err(|e| LinkError::Io(e.to_string()))?;
            let reply = Message::decode_payload(frame.kind, &frame.payload, protocol)
                .map_err(|e| LinkError::Io(e.to_string()))?;
            // Replies to earlier, abandoned requests are skipped.
            if reply.req().is_none() || reply.req() == request.req() {
                return Ok(reply);
            }
        }
    }
}

impl Endpoint for TcpEndpoint {
    fn next_req(&mut self) -> u64 {
        self.next += 1;
        self.next
    }

    fn round_trip(&mut self, request: &Message) -> Result<Message, LinkError> {
        self.connect()?;
        let protocol = self.protocol;
        let result = self.exchange(request, protocol);
        if result.is_err() {
            self.stream = None;
        }
        result
    }

    fn protocol(&self) -> Option<ProtocolId> {
        Some(self.protocol)
    }

    fn link_caps(&self) -> Option<(BTreeSet<ProtocolId>, BTreeSet<ProtocolId>)> {
        self.remote_caps.clone().map(|remote| (self.caps.clone(), remote))
    }

    /// Asks the peer to switch codec. Takes effect on the live connection
    /// right away, or at the next connect.
    fn switch_protocol(&mut self, protocol: ProtocolId) -> Result<ProtocolId, LinkError> {
        self.preferred = Some(protocol);
        if self.stream.is_some() {
            if let Err(e) = self.hello() {
                self.stream = None;
                return Err(e);
            }
        }
        Ok(self.protocol)
    }

    fn sent_log(&self) -> Vec<(MsgKind, ProtocolId)> {
        self.sent.clone()
    }
}

fn unavailable(e: TransportError) -> StoreError {
    StoreError::Unavailable(e.to_string())
}

/// A demand space living behind a transport agent.
pub struct TaClient {
    endpoint: Mutex<Box<dyn Endpoint>>,
    policy: RetryPolicy,
    poll_interval: Duration,
}

impl TaClient {
    pub fn new(endpoint: Box<dyn Endpoint>, policy: RetryPolicy) -> Self {
        Self {
            endpoint: Mutex::new(endpoint),
            policy,
            poll_interval: Duration::from_millis(5),
        }
    }

    pub fn tcp(addr: SocketAddr, key: impl Into<Vec<u8>>, peer: impl Into<String>) -> Self {
        Self::new(Box::new(TcpEndpoint::new(addr, key, peer)), RetryPolicy::default())
    }

    pub fn with_poll_interval(mut self, interval: Duration) -> Self {
        self.poll_interval = interval;
        self
    }

    pub fn protocol(&self) -> Option<ProtocolId> {
        self.endpoint.lock().protocol()
    }

    pub fn link_caps(&self) -> Option<(BTreeSet<ProtocolId>, BTreeSet<ProtocolId>)> {
        self.endpoint.lock().link_caps()
    }

    pub fn switch_protocol(&self, protocol: ProtocolId) -> Result<ProtocolId, LinkError> {
        self.endpoint.lock().switch_protocol(protocol)
    }

    pub fn sent_log(&self) -> Vec<(MsgKind, ProtocolId)> {
        self.endpoint.lock().sent_log()
    }

    fn call(&self, build: impl FnOnce(u64) -> Message) -> Result<Reply, StoreError> {
        let mut endpoint = self.endpoint.lock();
        let request = build(endpoint.next_req());
        match call_with_retry(endpoint.as_mut(), &request, &self.policy).map_err(unavailable)? {
            (Message::Ack(ack), _) => Ok(ack.reply),
            (other, _) => Err(unavailable(TransportError::UnexpectedReply(format!("{:?}", other.kind())))),
        }
    }

    fn mismatch(reply: Reply) -> StoreError {
        unavailable(TransportError::UnexpectedReply(format!("{reply:?}")))
    }
}

impl DemandSpace for TaClient {
    fn deposit_demand(&self, demand: &Demand) -> Result<DepositOutcome, StoreError> {
        demand.validate()?;
        match self.call(|req| Message::DepositDemand(DepositDemandMsg { req, demand: demand.clone() }))? {
            Reply::Deposit(outcome) => Ok(outcome),
            other => Err(Self::mismatch(other)),
        }
    }

    fn withdraw(&self, worker_id: &str, lease_ms: u64) -> Result<Option<Demand>, StoreError> {
        let msg = |req| {
            Message::Withdraw(WithdrawMsg {
                req,
                worker_id: worker_id.to_string(),
                lease_ms,
                release: None,
            })
        };
        match self.call(msg)? {
            Reply::Withdrawn(d) => Ok(d),
            other => Err(Self::mismatch(other)),
        }
    }

    fn deposit_result(&self, result: DemandResult) -> Result<Ack, StoreError> {
        match self.call(|req| Message::DepositResult(DepositResultMsg { req, result }))? {
            Reply::Result(ack) => Ok(ack),
            other => Err(Self::mismatch(other)),
        }
    }

    fn lookup(&self, sig: &SignatureKey) -> Result<Option<DemandResult>, StoreError> {
        let msg = |req| {
            Message::Lookup(LookupMsg {
                req,
                signature: Some(sig.clone()),
            })
        };
        match self.call(msg)? {
            Reply::Found(r) => Ok(r),
            other => Err(Self::mismatch(other)),
        }
    }

    fn release(&self, sig: &SignatureKey, worker_id: &str) -> Result<(), StoreError> {
        let msg = |req| {
            Message::Withdraw(WithdrawMsg {
                req,
                worker_id: worker_id.to_string(),
                lease_ms: 0,
                release: Some(sig.clone()),
            })
        };
        match self.call(msg)? {
            Reply::Released(_) => Ok(()),
            other => Err(Self::mismatch(other)),
        }
    }

    fn wait_result(&self, sig: &SignatureKey, _requester: &str, timeout: Duration) -> Result<Option<DemandResult>, StoreError> {
        let deadline = Instant::now() + timeout;
        loop {
            if let Some(r) = self.lookup(sig)? {
                return Ok(Some(r));
            }
            if Instant::now() >= deadline {
                return Ok(None);
            }
            std::thread::sleep(self.poll_interval.min(deadline.saturating_duration_since(Instant::now())));
        }
    }

    fn pending_len(&self) -> Result<usize, StoreError> {
        match self.call(|req| Message::Lookup(LookupMsg { req, signature: None }))? {
            Reply::PendingLen(n) => Ok(n as usize),
            other => Err(Self::mismatch(other)),
        }
    }
}

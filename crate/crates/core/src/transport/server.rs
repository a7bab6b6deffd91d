//! Server side of the dispatcher proxy: turns verified frames into store
//! operations.

use std::collections::{BTreeSet, HashMap};
use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use parking_lot::Mutex;

use super::frame::{frame_decode, frame_encode, parse_header, FrameError, MsgKind, HEADER_LEN, MAC_LEN};
use super::message::{AckMsg, ErrMsg, Message, Reply};
use super::{negotiate_protocol, tcp_caps, ProtocolId};
use crate::store::{DemandStore, StoreError};

/// Per-connection state.
#[derive(Debug, Clone)]
pub struct Session {
    pub peer: String,
    pub protocol: ProtocolId,
}

impl Session {
    pub fn new(peer: impl Into<String>) -> Self {
        Self {
            peer: peer.into(),
            protocol: ProtocolId::TcpText,
        }
    }
}

/// What frame verification concluded about an incoming message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FrameVerdict {
    Valid(MsgKind),
    Invalid(FrameError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SecurityVerdict {
    Accept,
    Discard,
}

/// Inspects every incoming message before it may touch the store.
pub trait MessageGate: Send + Sync {
    fn check(&self, verdict: &FrameVerdict, sender: &str) -> SecurityVerdict;
}

fn error_code(e: &FrameError) -> &'static str {
    match e {
        FrameError::BadMagic => "BadMagic",
        FrameError::BadVersion(_) => "BadVersion",
        FrameError::LengthMismatch { .. } => "LengthMismatch",
        FrameError::BadSignature => "BadSignature",
        FrameError::UnknownKind(_) => "UnknownKind",
        FrameError::PayloadTooLarge(_) => "PayloadTooLarge",
        FrameError::Schema(..) => "Schema",
    }
}

pub struct TaHandler {
    store: Arc<DemandStore>,
    key: Vec<u8>,
    caps: BTreeSet<ProtocolId>,
    gate: Option<Arc<dyn MessageGate>>,
    // Last withdraw reply per worker, so a retransmitted request gets the
    // same demand instead of a second lease.
    withdraw_replies: Mutex<HashMap<String, (u64, Reply)>>,
    discarded: AtomicU64,
}

impl TaHandler {
    pub fn new(store: Arc<DemandStore>, key: impl Into<Vec<u8>>) -> Self {
        Self {
            store,
            key: key.into(),
            caps: tcp_caps(),
            gate: None,
            withdraw_replies: Mutex::new(HashMap::new()),
            discarded: AtomicU64::new(0),
        }
    }

    pub fn with_gate(mut self, gate: Arc<dyn MessageGate>) -> Self {
        self.gate = Some(gate);
        self
    }

    pub fn with_caps(mut self, caps: BTreeSet<ProtocolId>) -> Self {
        self.caps = caps;
        self
    }

    pub fn store(&self) -> &Arc<DemandStore> {
        &self.store
    }

    pub fn caps(&self) -> &BTreeSet<ProtocolId> {
        &self.caps
    }

    /// Messages discarded by verification or the gate.
    pub fn discarded(&self) -> u64 {
        self.discarded.load(Ordering::Relaxed)
    }

    fn admit(&self, verdict: &FrameVerdict, sender: &str) -> bool {
        let decision = match &self.gate {
            Some(gate) => gate.check(verdict, sender),
            None => match verdict {
                FrameVerdict::Valid(_) => SecurityVerdict::Accept,
                FrameVerdict::Invalid(_) => SecurityVerdict::Discard,
            },
        };
        let ok = decision == SecurityVerdict::Accept && matches!(verdict, FrameVerdict::Valid(_));
        if !ok {
            self.discarded.fetch_add(1, Ordering::Relaxed);
        }
        ok
    }

    fn err_frame(&self, req: Option<u64>, code: &str, message: String) -> Vec<u8> {
        let msg = Message::Err(ErrMsg {
            req,
            code: code.to_string(),
            message,
        });
        let payload = msg.encode_payload(ProtocolId::TcpText).expect("error payload encodes");
        frame_encode(MsgKind::Err, &payload, &self.key).expect("error frame fits")
    }

    /// Reports a frame rejected before its body was read (bad header on a
    /// stream) and returns the error reply.
    pub fn reject(&self, session: &Session, err: FrameError) -> Vec<u8> {
        let verdict = FrameVerdict::Invalid(err.clone());
        self.admit(&verdict, &session.peer);
        self.err_frame(None, error_code(&err), err.to_string())
    }

    /// Verifies one complete frame and executes it. Returns the reply frame.
    pub fn handle_frame(&self, session: &mut Session, bytes: &[u8]) -> Vec<u8> {
        let decoded = frame_decode(bytes, &self.key)
            .and_then(|f| Message::decode_payload(f.kind, &f.payload, session.protocol));
        let (verdict, message) = match decoded {
            Ok(m) => (FrameVerdict::Valid(m.kind()), Some(m)),
            Err(e) => (FrameVerdict::Invalid(e), None),
        };
        if !self.admit(&verdict, &session.peer) {
            let (code, text) = match &verdict {
                FrameVerdict::Invalid(e) => (error_code(e), e.to_string()),
                FrameVerdict::Valid(_) => ("Discarded", "message discarded by security policy".to_string()),
            };
            return self.err_frame(message.and_then(|m| m.req()), code, text);
        }
        let message = message.expect("valid verdict carries a message");
        let is_hello = matches!(message, Message::Hello(_));
        let reply = self.handle_message(session, message);
        let protocol = if is_hello { ProtocolId::TcpText } else { session.protocol };
        let kind = reply.kind();
        match reply.encode_payload(protocol).and_then(|p| frame_encode(kind, &p, &self.key)) {
            Ok(bytes) => bytes,
            Err(e) => self.err_frame(reply.req(), "Encode", e.to_string()),
        }
    }

    /// Executes an already verified message against the store.
    pub fn handle_message(&self, session: &mut Session, message: Message) -> Message {
        let req = message.req();
        let ack = |reply: Reply| Message::Ack(AckMsg { req: req.unwrap_or(0), reply });
        let store_err = |e: StoreError| {
            Message::Err(ErrMsg {
                req,
                code: "Store".into(),
                message: e.to_string(),
            })
        };
        match message {
            Message::DepositDemand(m) => match self.store.deposit_demand(&m.demand) {
                Ok(outcome) => ack(Reply::Deposit(outcome)),
                Err(e) => store_err(e),
            },
            Message::Withdraw(m) => {
                if let Some(sig) = m.release {
                    return match self.store.release(&sig, &m.worker_id) {
                        Ok(released) => ack(Reply::Released(released)),
                        Err(e) => store_err(e),
                    };
                }
                let mut cache = self.withdraw_replies.lock();
                if let Some((last_req, reply)) = cache.get(&m.worker_id) {
                    if *last_req == m.req {
                        return ack(reply.clone());
                    }
                    if *last_req > m.req {
                        return Message::Err(ErrMsg {
                            req,
                            code: "Stale".into(),
                            message: format!("request {} superseded by {}", m.req, last_req),
                        });
                    }
                }
                let now = self.store.clock().now_millis();
                match self.store.withdraw_pending(&m.worker_id, now, m.lease_ms) {
                    Ok(demand) => {
                        let reply = Reply::Withdrawn(demand);
                        cache.insert(m.worker_id, (m.req, reply.clone()));
                        ack(reply)
                    }
                    Err(e) => store_err(e),
                }
            }
            Message::DepositResult(m) => {
                let sig = m.result.signature.clone();
                match self.store.deposit_result(&sig, m.result) {
                    Ok(a) => ack(Reply::Result(a)),
                    Err(e) => store_err(e),
                }
            }
            Message::Lookup(m) => match m.signature {
                Some(sig) => ack(Reply::Found(self.store.lookup(&sig))),
                None => ack(Reply::PendingLen(self.store.pending_len() as u64)),
            },
            Message::Hello(m) => {
                let chosen = match m.preferred {
                    Some(p) if m.caps.contains(&p) && self.caps.contains(&p) => Ok(p),
                    _ => negotiate_protocol(&self.caps, &m.caps),
                };
                match chosen {
                    Ok(p) => {
                        session.protocol = p;
                        session.peer = m.peer;
                        ack(Reply::Hello {
                            protocol: p,
                            caps: self.caps.clone(),
                        })
                    }
                    Err(e) => Message::Err(ErrMsg {
                        req,
                        code: "NoCommonProtocol".into(),
                        message: e.to_string(),
                    }),
                }
            }
            Message::Ack(_) | Message::Err(_) | Message::Event(_) => Message::Err(ErrMsg {
                req,
                code: "Unexpected".into(),
                message: "servers only accept requests".into(),
            }),
        }
    }
}

pub struct TaServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl TaServer {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for TaServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Serves frames on `listener` until the returned server is stopped. Each
/// connection gets its own thread; a failing connection never takes the
/// server down.
pub fn ta_serve(listener: TcpListener, handler: Arc<TaHandler>) -> io::Result<TaServer> {
    let addr = listener.local_addr()?;
    listener.set_nonblocking(true)?;
    let stop = Arc::new(AtomicBool::new(false));
    let thread = {
        let stop = stop.clone();
        std::thread::Builder::new().name(format!("ta-{addr}")).spawn(move || {
            while !stop.load(Ordering::SeqCst) {
                match listener.accept() {
                    Ok((stream, peer)) => {
                        let handler = handler.clone();
                        let stop = stop.clone();
                        let _ = std::thread::Builder::new()
                            .name(format!("ta-conn-{peer}"))
                            .spawn(move || {
                                if let Err(e) = serve_connection(stream, peer, &handler, &stop) {
                                    log::debug!("connection {peer} closed: {e}");
                                }
                            });
                    }
                    Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                        std::thread::sleep(Duration::from_millis(2));
                    }
                    Err(e) => {
                        log::warn!("accept failed on {addr}: {e}");
                        std::thread::sleep(Duration::from_millis(10));
                    }
                }
            }
        })?
    };
    Ok(TaServer {
        addr,
        stop,
        thread: Some(thread),
    })
}

fn read_full(stream: &mut TcpStream, buf: &mut [u8], stop: &AtomicBool) -> io::Result<bool> {
    let mut filled = 0;
    while filled < buf.len() {
        match stream.read(&mut buf[filled..]) {
            Ok(0) => {
                if filled == 0 {
                    return Ok(false);
                }
                return Err(io::ErrorKind::UnexpectedEof.into());
            }
            Ok(n) => filled += n,
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                if stop.load(Ordering::SeqCst) {
                    return Err(io::ErrorKind::Interrupted.into());
                }
            }
            Err(e) => return Err(e),
        }
    }
    Ok(true)
}

fn serve_connection(mut stream: TcpStream, peer: SocketAddr, handler: &TaHandler, stop: &AtomicBool) -> io::Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(Duration::from_millis(50)))?;
    let mut session = Session::new(peer.to_string());
    loop {
        let mut header = [0u8; HEADER_LEN];
        if !read_full(&mut stream, &mut header, stop)? {
            return Ok(());
        }
        let declared = match parse_header(&header) {
            Ok((_, len)) => len,
            Err(e) => {
                // The stream cannot be resynchronized after a bad header.
                stream.write_all(&handler.reject(&session, e))?;
                stream.shutdown(std::net::Shutdown::Write)?;
                // Drain what the peer already sent so closing does not reset
                // the connection before our reply is read.
                let mut sink = [0u8; 4096];
                for _ in 0..20 {
                    if !matches!(stream.read(&mut sink), Ok(n) if n > 0) {
                        break;
                    }
                }
                return Ok(());
            }
        };
        let mut frame = header.to_vec();
        frame.resize(HEADER_LEN + declared + MAC_LEN, 0);
        read_full(&mut stream, &mut frame[HEADER_LEN..], stop)?;
        let reply = handler.handle_frame(&mut session, &frame);
        stream.write_all(&reply)?;
    }
}

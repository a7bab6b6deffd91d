//! Deterministic unreliable link for exercising retransmission.
//!
//! Frames travel through an in-transit buffer in each direction. Each frame
//! may be dropped or duplicated on entry, and delivery picks a random buffered
//! frame while holding back up to `reorder_window - 1` of them, so frames
//! overtake each other and late copies of old requests reach the server
//! during later calls.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::client::{Endpoint, LinkError};
use super::frame::{frame_decode, frame_encode};
use super::message::Message;
use super::server::{Session, TaHandler};
use super::ProtocolId;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkFaults {
    pub drop_probability: f64,
    pub duplicate_probability: f64,
    pub reorder_window: usize,
}

impl LinkFaults {
    pub fn none() -> Self {
        Self {
            drop_probability: 0.0,
            duplicate_probability: 0.0,
            reorder_window: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LinkStats {
    pub sent: u64,
    pub dropped: u64,
    pub duplicated: u64,
    pub delivered: u64,
}

pub struct LossyLink {
    handler: Arc<TaHandler>,
    key: Vec<u8>,
    session: Session,
    faults: LinkFaults,
    rng: ChaCha8Rng,
    to_server: Vec<Vec<u8>>,
    to_client: Vec<Vec<u8>>,
    next: u64,
    stats: LinkStats,
}

impl LossyLink {
    pub fn new(handler: Arc<TaHandler>, key: impl Into<Vec<u8>>, faults: LinkFaults, seed: u64) -> Self {
        Self {
            handler,
            key: key.into(),
            session: Session::new("lossy-link"),
            faults,
            rng: ChaCha8Rng::seed_from_u64(seed),
            to_server: Vec::new(),
            to_client: Vec::new(),
            next: 0,
            stats: LinkStats::default(),
        }
    }

    pub fn stats(&self) -> LinkStats {
        self.stats
    }

    pub fn session_protocol(&self) -> ProtocolId {
        self.session.protocol
    }

    fn transmit(&mut self, frame: Vec<u8>, to_server: bool) {
        self.stats.sent += 1;
        if self.rng.gen_bool(self.faults.drop_probability) {
            self.stats.dropped += 1;
            return;
        }
        let copies = if self.rng.gen_bool(self.faults.duplicate_probability) {
            self.stats.duplicated += 1;
            2
        } else {
            1
        };
        let buffer = if to_server { &mut self.to_server } else { &mut self.to_client };
        for _ in 0..copies {
            buffer.push(frame.clone());
        }
    }

    fn held_back(&mut self) -> usize {
        self.rng.gen_range(0..self.faults.reorder_window.max(1))
    }

    fn deliver_to_server(&mut self, hold: usize) {
        while self.to_server.len() > hold {
            let i = self.rng.gen_range(0..self.to_server.len());
            let frame = self.to_server.swap_remove(i);
            self.stats.delivered += 1;
            let reply = self.handler.handle_frame(&mut self.session, &frame);
            self.transmit(reply, false);
        }
    }

    /// Delivers everything still in transit towards the server and drops
    /// replies nobody waits for any more.
    pub fn flush(&mut self) {
        self.deliver_to_server(0);
        self.to_client.clear();
    }
}

impl Endpoint for LossyLink {
    fn next_req(&mut self) -> u64 {
        self.next += 1;
        self.next
    }

    fn round_trip(&mut self, request: &Message) -> Result<Message, LinkError> {
        let protocol = self.session.protocol;
        let payload = request.encode_payload(protocol).map_err(|e| LinkError::Io(e.to_string()))?;
        let frame = frame_encode(request.kind(), &payload, &self.key).map_err(|e| LinkError::Io(e.to_string()))?;
        self.transmit(frame, true);
        let hold = self.held_back();
        self.deliver_to_server(hold);

        let hold = self.held_back();
        let mut answer = None;
        while self.to_client.len() > hold {
            let i = self.rng.gen_range(0..self.to_client.len());
            let bytes = self.to_client.swap_remove(i);
            self.stats.delivered += 1;
            let Ok(frame) = frame_decode(&bytes, &self.key) else { continue };
            let Ok(reply) = Message::decode_payload(frame.kind, &frame.payload, protocol) else { continue };
            if answer.is_none() && reply.req() == request.req() {
                answer = Some(reply);
            }
        }
        answer.ok_or(LinkError::Timeout)
    }
}

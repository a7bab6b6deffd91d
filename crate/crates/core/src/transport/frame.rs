//! Wire frames.
//!
//! ```text
//! +-------+---------+----------+-------------+---------+-----------------+
//! | magic | version | msg_kind | payload_len | payload | HMAC-SHA-256    |
//! | EDMF  | u8 = 1  | u8       | u32 BE      | bytes   | 32 bytes        |
//! +-------+---------+----------+-------------+---------+-----------------+
//! ```
//!
//! The MAC covers the 10-byte header and the payload.

use hmac::{Hmac, Mac};
use sha2::Sha256;
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"EDMF";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 10;
pub const MAC_LEN: usize = 32;
pub const MAX_PAYLOAD: usize = 16 * 1024 * 1024;

type HmacSha256 = Hmac<Sha256>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgKind {
    DepositDemand = 0,
    Withdraw = 1,
    DepositResult = 2,
    Lookup = 3,
    Ack = 4,
    Hello = 5,
    Err = 6,
    Event = 7,
}

impl MsgKind {
    pub fn from_u8(b: u8) -> Option<Self> {
        Some(match b {
            0 => MsgKind::DepositDemand,
            1 => MsgKind::Withdraw,
            2 => MsgKind::DepositResult,
            3 => MsgKind::Lookup,
            4 => MsgKind::Ack,
            5 => MsgKind::Hello,
            6 => MsgKind::Err,
            7 => MsgKind::Event,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FrameError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported frame version {0}")]
    BadVersion(u8),
    #[error("payload length {declared} does not match {actual} bytes received")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("frame signature check failed")]
    BadSignature,
    #[error("unknown message kind {0}")]
    UnknownKind(u8),
    #[error("payload of {0} bytes exceeds the 16 MiB limit")]
    PayloadTooLarge(usize),
    #[error("payload does not match the {0:?} schema: {1}")]
    Schema(MsgKind, String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub kind: MsgKind,
    pub payload: Vec<u8>,
}

fn mac(key: &[u8], header: &[u8], payload: &[u8]) -> HmacSha256 {
    let mut m = HmacSha256::new_from_slice(key).expect("HMAC accepts any key length");
    m.update(header);
    m.update(payload);
    m
}

pub fn frame_encode(kind: MsgKind, payload: &[u8], key: &[u8]) -> Result<Vec<u8>, FrameError> {
    if payload.len() > MAX_PAYLOAD {
        return Err(FrameError::PayloadTooLarge(payload.len()));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len() + MAC_LEN);
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(kind as u8);
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    let tag = mac(key, &out, payload).finalize().into_bytes();
    out.extend_from_slice(payload);
    out.extend_from_slice(&tag);
    Ok(out)
}

/// Parses the fixed header, returning the kind byte and declared payload
/// length. Used by stream readers before the body arrives.
pub fn parse_header(header: &[u8]) -> Result<(u8, usize), FrameError> {
    if header.len() < HEADER_LEN {
        return Err(FrameError::LengthMismatch {
            declared: 0,
            actual: header.len(),
        });
    }
    if header[0..4] != MAGIC {
        return Err(FrameError::BadMagic);
    }
    if header[4] != VERSION {
        return Err(FrameError::BadVersion(header[4]));
    }
    let declared = u32::from_be_bytes([header[6], header[7], header[8], header[9]]) as usize;
    if declared > MAX_PAYLOAD {
        return Err(FrameError::PayloadTooLarge(declared));
    }
    Ok((header[5], declared))
}

pub fn frame_decode(bytes: &[u8], key: &[u8]) -> Result<Frame, FrameError> {
    let (kind_byte, declared) = parse_header(bytes)?;
    let actual = bytes.len().saturating_sub(HEADER_LEN + MAC_LEN);
    if bytes.len() < HEADER_LEN + MAC_LEN || actual != declared {
        return Err(FrameError::LengthMismatch { declared, actual });
    }
    let payload = &bytes[HEADER_LEN..HEADER_LEN + declared];
    let tag = &bytes[HEADER_LEN + declared..];
    mac(key, &bytes[..HEADER_LEN], payload)
        .verify_slice(tag)
        .map_err(|_| FrameError::BadSignature)?;
    let kind = MsgKind::from_u8(kind_byte).ok_or(FrameError::UnknownKind(kind_byte))?;
    Ok(Frame {
        kind,
        payload: payload.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const KEY: &[u8] = b"instance-secret";

    #[test]
    fn empty_ack_is_42_bytes() {
        // 4 magic + 1 version + 1 kind + 4 length + 0 payload + 32 mac
        let bytes = frame_encode(MsgKind::Ack, &[], KEY).unwrap();
        assert_eq!(bytes.len(), 4 + 1 + 1 + 4 + 32);
        assert_eq!(&bytes[..10], b"EDMF\x01\x04\x00\x00\x00\x00");
        let frame = frame_decode(&bytes, KEY).unwrap();
        assert_eq!(frame, Frame { kind: MsgKind::Ack, payload: vec![] });
    }

    #[test]
    fn flipped_payload_byte_fails_mac() {
        let mut bytes = frame_encode(MsgKind::DepositDemand, b"{\"x\":1}", KEY).unwrap();
        bytes[HEADER_LEN + 2] ^= 0x01;
        assert_eq!(frame_decode(&bytes, KEY), Err(FrameError::BadSignature));
    }

    #[test]
    fn wrong_key_fails_mac() {
        let bytes = frame_encode(MsgKind::Lookup, b"abc", KEY).unwrap();
        assert_eq!(frame_decode(&bytes, b"other"), Err(FrameError::BadSignature));
    }

    #[test]
    fn error_cases_are_distinct() {
        let good = frame_encode(MsgKind::Withdraw, b"payload", KEY).unwrap();

        let mut magic = good.clone();
        magic[0] = b'X';
        assert_eq!(frame_decode(&magic, KEY), Err(FrameError::BadMagic));

        let mut version = good.clone();
        version[4] = 2;
        assert_eq!(frame_decode(&version, KEY), Err(FrameError::BadVersion(2)));

        let mut long = good.clone();
        long[9] += 5;
        assert!(matches!(
            frame_decode(&long, KEY),
            Err(FrameError::LengthMismatch { declared: 12, actual: 7 })
        ));

        let truncated = &good[..good.len() - 1];
        assert!(matches!(frame_decode(truncated, KEY), Err(FrameError::LengthMismatch { .. })));
    }

    #[test]
    fn unknown_kind_after_valid_mac() {
        let mut bytes = frame_encode(MsgKind::Ack, b"", KEY).unwrap();
        bytes[5] = 9;
        // Re-sign the altered header so only the kind is wrong.
        let tag = mac(KEY, &bytes[..HEADER_LEN], &[]).finalize().into_bytes();
        bytes[HEADER_LEN..].copy_from_slice(&tag);
        assert_eq!(frame_decode(&bytes, KEY), Err(FrameError::UnknownKind(9)));
    }

    #[test]
    fn oversized_payload_rejected() {
        let mut header = b"EDMF\x01\x00".to_vec();
        header.extend_from_slice(&((MAX_PAYLOAD + 1) as u32).to_be_bytes());
        assert_eq!(parse_header(&header), Err(FrameError::PayloadTooLarge(MAX_PAYLOAD + 1)));
    }

    proptest! {
        #[test]
        fn encode_decode_roundtrip(kind in 0u8..8, payload in proptest::collection::vec(any::<u8>(), 0..512)) {
            let kind = MsgKind::from_u8(kind).unwrap();
            let bytes = frame_encode(kind, &payload, KEY).unwrap();
            prop_assert_eq!(bytes.len(), HEADER_LEN + payload.len() + MAC_LEN);
            prop_assert_eq!(frame_decode(&bytes, KEY).unwrap(), Frame { kind, payload });
        }
    }
}

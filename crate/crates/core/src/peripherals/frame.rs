// SPDX-License-Identifier: Apache-2.0

//! Fixed-size link frames and the initial handshake message.
//!
//! Frame layout (32 bytes):
//!
//! ```text
//! 0      1      2      3                               32
//! +------+------+------+-------------------------------+
//! | type | seq  | len  | payload (29 bytes, 0-padded)  |
//! +------+------+------+-------------------------------+
//! ```
//!
//! Payloads longer than 29 bytes are split across frames with `seq`
//! counting up from 0. A frame with `len < 29` ends the message; if the
//! message length is a multiple of 29 an empty terminating frame follows.
//!
//! Handshake layout (60 bytes):
//!
//! ```text
//! 0       4         6      8                24                   56        60
//! +-------+---------+------+----------------+--------------------+---------+
//! | "PIE1"| version | kind | nonce (16)     | cert digest (32)   | 0 (4)   |
//! +-------+---------+------+----------------+--------------------+---------+
//! ```
//!
//! Multi-byte integers are big-endian.

use thiserror::Error;

pub const FRAME_LEN: usize = 32;
pub const FRAME_PAYLOAD: usize = 29;
pub const HANDSHAKE_LEN: usize = 60;
pub const HANDSHAKE_MAGIC: [u8; 4] = *b"PIE1";
pub const PROTOCOL_VERSION: u16 = 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FrameError {
    #[error("payload of {0} bytes exceeds the 29-byte frame payload")]
    PayloadTooLong(usize),
    #[error("frame must be exactly 32 bytes, got {0}")]
    BadLength(usize),
    #[error("unknown frame type {0:#04x}")]
    UnknownType(u8),
    #[error("non-zero padding after payload")]
    DirtyPadding,
    #[error("frame sequence out of order: expected {expected}, got {got}")]
    OutOfOrder { expected: u8, got: u8 },
    #[error("frame type changed mid-message")]
    MixedTypes,
    #[error("message too long to chunk")]
    MessageTooLong,
    #[error("malformed handshake: {0}")]
    Handshake(&'static str),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum FrameType {
    Data = 0x01,
    Challenge = 0x02,
    ChallengeResponse = 0x03,
    Reset = 0x04,
    DmaConfig = 0x05,
}

impl FrameType {
    pub const ALL: [FrameType; 5] =
        [FrameType::Data, FrameType::Challenge, FrameType::ChallengeResponse, FrameType::Reset, FrameType::DmaConfig];

    pub fn from_u8(b: u8) -> Result<Self, FrameError> {
        Self::ALL.into_iter().find(|t| *t as u8 == b).ok_or(FrameError::UnknownType(b))
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Frame {
    ty: FrameType,
    seq: u8,
    len: u8,
    payload: [u8; FRAME_PAYLOAD],
}

impl std::fmt::Debug for Frame {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Frame({:?}, seq={}, {})", self.ty, self.seq, hex::encode(self.data()))
    }
}

impl Frame {
    pub fn new(ty: FrameType, seq: u8, data: &[u8]) -> Result<Self, FrameError> {
        if data.len() > FRAME_PAYLOAD {
            return Err(FrameError::PayloadTooLong(data.len()));
        }
        let mut payload = [0u8; FRAME_PAYLOAD];
        payload[..data.len()].copy_from_slice(data);
        Ok(Frame { ty, seq, len: data.len() as u8, payload })
    }

    pub fn frame_type(&self) -> FrameType {
        self.ty
    }

    pub fn seq(&self) -> u8 {
        self.seq
    }

    pub fn data(&self) -> &[u8] {
        &self.payload[..self.len as usize]
    }

    /// True for the last frame of a message.
    pub fn is_terminal(&self) -> bool {
        (self.len as usize) < FRAME_PAYLOAD
    }

    pub fn encode(&self) -> [u8; FRAME_LEN] {
        let mut out = [0u8; FRAME_LEN];
        out[0] = self.ty as u8;
        out[1] = self.seq;
        out[2] = self.len;
        out[3..].copy_from_slice(&self.payload);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FrameError> {
        if bytes.len() != FRAME_LEN {
            return Err(FrameError::BadLength(bytes.len()));
        }
        let ty = FrameType::from_u8(bytes[0])?;
        let len = bytes[2] as usize;
        if len > FRAME_PAYLOAD {
            return Err(FrameError::PayloadTooLong(len));
        }
        if bytes[3 + len..].iter().any(|b| *b != 0) {
            return Err(FrameError::DirtyPadding);
        }
        Frame::new(ty, bytes[1], &bytes[3..3 + len])
    }
}

/// Splits a message into frames of one type.
pub fn chunk(ty: FrameType, data: &[u8]) -> Result<Vec<Frame>, FrameError> {
    let n = data.len() / FRAME_PAYLOAD + 1;
    if n > 256 {
        return Err(FrameError::MessageTooLong);
    }
    (0..n)
        .map(|i| {
            let lo = i * FRAME_PAYLOAD;
            let hi = (lo + FRAME_PAYLOAD).min(data.len());
            Frame::new(ty, i as u8, &data[lo..hi])
        })
        .collect()
}

/// Collects frames of one message until the terminal frame arrives.
#[derive(Clone, Debug, Default)]
pub struct Reassembler {
    ty: Option<FrameType>,
    next_seq: u8,
    buf: Vec<u8>,
}

impl Reassembler {
    pub fn push(&mut self, f: &Frame) -> Result<Option<(FrameType, Vec<u8>)>, FrameError> {
        let res = self.push_inner(f);
        if !matches!(res, Ok(None)) {
            *self = Reassembler::default();
        }
        res
    }

    fn push_inner(&mut self, f: &Frame) -> Result<Option<(FrameType, Vec<u8>)>, FrameError> {
        if f.seq != self.next_seq {
            return Err(FrameError::OutOfOrder { expected: self.next_seq, got: f.seq });
        }
        match self.ty {
            Some(t) if t != f.ty => return Err(FrameError::MixedTypes),
            _ => self.ty = Some(f.ty),
        }
        self.buf.extend_from_slice(f.data());
        if f.is_terminal() {
            return Ok(Some((f.ty, std::mem::take(&mut self.buf))));
        }
        self.next_seq = self.next_seq.checked_add(1).ok_or(FrameError::MessageTooLong)?;
        Ok(None)
    }

    pub fn is_idle(&self) -> bool {
        self.ty.is_none()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HandshakeMsg {
    pub protocol_version: u16,
    pub peripheral_kind: u16,
    pub peripheral_nonce: [u8; 16],
    pub certificate_digest: [u8; 32],
}

impl HandshakeMsg {
    pub fn encode(&self) -> [u8; HANDSHAKE_LEN] {
        let mut out = [0u8; HANDSHAKE_LEN];
        out[0..4].copy_from_slice(&HANDSHAKE_MAGIC);
        out[4..6].copy_from_slice(&self.protocol_version.to_be_bytes());
        out[6..8].copy_from_slice(&self.peripheral_kind.to_be_bytes());
        out[8..24].copy_from_slice(&self.peripheral_nonce);
        out[24..56].copy_from_slice(&self.certificate_digest);
        out
    }

    pub fn decode(b: &[u8]) -> Result<Self, FrameError> {
        if b.len() != HANDSHAKE_LEN {
            return Err(FrameError::Handshake("length is not 60"));
        }
        if b[0..4] != HANDSHAKE_MAGIC {
            return Err(FrameError::Handshake("bad magic"));
        }
        if b[56..].iter().any(|x| *x != 0) {
            return Err(FrameError::Handshake("reserved bytes set"));
        }
        Ok(HandshakeMsg {
            protocol_version: u16::from_be_bytes([b[4], b[5]]),
            peripheral_kind: u16::from_be_bytes([b[6], b[7]]),
            peripheral_nonce: b[8..24].try_into().unwrap(),
            certificate_digest: b[24..56].try_into().unwrap(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn data_frame_layout() {
        let f = Frame::new(FrameType::Data, 3, &[1, 2, 3, 4, 5]).unwrap();
        let b = f.encode();
        assert_eq!(b.len(), 32);
        assert_eq!(&b[..8], &[0x01, 3, 5, 1, 2, 3, 4, 5]);
        assert!(b[8..].iter().all(|x| *x == 0));
        assert_eq!(Frame::decode(&b).unwrap(), f);
    }

    #[test]
    fn payload_bound() {
        assert_eq!(Frame::new(FrameType::Data, 0, &[0; 30]).unwrap_err(), FrameError::PayloadTooLong(30));
        let mut b = [0u8; 32];
        b[0] = 1;
        b[2] = 30;
        assert_eq!(Frame::decode(&b).unwrap_err(), FrameError::PayloadTooLong(30));
        b[2] = 0;
        b[31] = 1;
        assert_eq!(Frame::decode(&b).unwrap_err(), FrameError::DirtyPadding);
        b[0] = 9;
        assert_eq!(Frame::decode(&b).unwrap_err(), FrameError::UnknownType(9));
        assert_eq!(Frame::decode(&b[..31]).unwrap_err(), FrameError::BadLength(31));
    }

    #[test]
    fn chunking_signature_sized_message() {
        let frames = chunk(FrameType::ChallengeResponse, &[7u8; 64]).unwrap();
        assert_eq!(frames.iter().map(|f| f.data().len()).collect::<Vec<_>>(), vec![29, 29, 6]);
        let exact = chunk(FrameType::Data, &[1u8; 58]).unwrap();
        assert_eq!(exact.len(), 3);
        assert_eq!(exact[2].data().len(), 0);
    }

    #[test]
    fn reassembler_rejects_gaps_and_mixing() {
        let frames = chunk(FrameType::Data, &[1u8; 40]).unwrap();
        let mut r = Reassembler::default();
        assert!(r.push(&frames[1]).is_err());
        assert_eq!(r.push(&frames[0]).unwrap(), None);
        let wrong = Frame::new(FrameType::Reset, 1, &[]).unwrap();
        assert_eq!(r.push(&wrong).unwrap_err(), FrameError::MixedTypes);
        assert!(r.is_idle());
    }

    #[test]
    fn handshake_layout() {
        let h = HandshakeMsg {
            protocol_version: PROTOCOL_VERSION,
            peripheral_kind: 2,
            peripheral_nonce: [0xAA; 16],
            certificate_digest: [0x55; 32],
        };
        let b = h.encode();
        assert_eq!(b.len(), 60);
        assert_eq!(&b[..8], b"PIE1\x00\x01\x00\x02");
        assert_eq!(&b[8..24], &[0xAA; 16]);
        assert_eq!(&b[24..56], &[0x55; 32]);
        assert_eq!(&b[56..], &[0; 4]);
        assert_eq!(HandshakeMsg::decode(&b).unwrap(), h);
    }

    fn any_frame() -> impl Strategy<Value = Frame> {
        (0usize..5, any::<u8>(), proptest::collection::vec(any::<u8>(), 0..=FRAME_PAYLOAD))
            .prop_map(|(t, seq, data)| Frame::new(FrameType::ALL[t], seq, &data).unwrap())
    }

    proptest! {
        #[test]
        fn frame_round_trip(f in any_frame()) {
            let b = f.encode();
            prop_assert_eq!(b.len(), FRAME_LEN);
            prop_assert_eq!(Frame::decode(&b).unwrap(), f);
        }

        #[test]
        fn chunk_reassemble(data in proptest::collection::vec(any::<u8>(), 0..600)) {
            let frames = chunk(FrameType::Data, &data).unwrap();
            let mut r = Reassembler::default();
            let mut out = None;
            for f in &frames {
                prop_assert!(out.is_none());
                out = r.push(f).unwrap();
            }
            prop_assert_eq!(out, Some((FrameType::Data, data)));
        }
    }
}

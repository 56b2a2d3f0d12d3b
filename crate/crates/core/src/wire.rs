//! Binary frame format shared by every client, worker and broker link.
//!
//! ```text
//! [0..4)   magic "AMF1"
//! [4]      version (1)
//! [5]      msg_kind
//! [6]      service_type
//! [7]      flags (reserved, 0)
//! [8..16)  request_id      u64 LE
//! [16..24) timestamp_us    u64 LE
//! [24]     session_id length u8
//!          session_id bytes (UTF-8)
//!          payload length u32 LE
//!          payload bytes
//! ```
//!
//! Enumerations are encoded as their zero-based declaration index.

use std::fmt;
use std::str::FromStr;

use bytes::{Buf, Bytes, BytesMut};
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"AMF1";
pub const VERSION: u8 = 1;
/// Size of a frame whose session id and payload are both empty.
pub const FIXED_HEADER_LEN: usize = 29;
pub const MAX_SESSION_ID_LEN: usize = u8::MAX as usize;
pub const MAX_PAYLOAD_LEN: usize = u32::MAX as usize;

const SESSION_LEN_OFFSET: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MsgKind {
    Connect,
    ConnectAck,
    Request,
    Reply,
    Heartbeat,
    Disconnect,
    WorkerReady,
    SessionEvent,
    Error,
}

impl MsgKind {
    pub const ALL: [MsgKind; 9] = [
        MsgKind::Connect,
        MsgKind::ConnectAck,
        MsgKind::Request,
        MsgKind::Reply,
        MsgKind::Heartbeat,
        MsgKind::Disconnect,
        MsgKind::WorkerReady,
        MsgKind::SessionEvent,
        MsgKind::Error,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ServiceType {
    Asr,
    Nlu,
    Dm,
    Nlg,
    Tts,
    Qa,
    Ccs,
    Location,
    Weather,
    Control,
}

impl ServiceType {
    pub const ALL: [ServiceType; 10] = [
        ServiceType::Asr,
        ServiceType::Nlu,
        ServiceType::Dm,
        ServiceType::Nlg,
        ServiceType::Tts,
        ServiceType::Qa,
        ServiceType::Ccs,
        ServiceType::Location,
        ServiceType::Weather,
        ServiceType::Control,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ServiceType::Asr => "ASR",
            ServiceType::Nlu => "NLU",
            ServiceType::Dm => "DM",
            ServiceType::Nlg => "NLG",
            ServiceType::Tts => "TTS",
            ServiceType::Qa => "QA",
            ServiceType::Ccs => "CCS",
            ServiceType::Location => "LOCATION",
            ServiceType::Weather => "WEATHER",
            ServiceType::Control => "CONTROL",
        }
    }
}

impl fmt::Display for ServiceType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ServiceType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let upper = s.to_ascii_uppercase();
        ServiceType::ALL
            .into_iter()
            .find(|svc| svc.name() == upper)
            .ok_or_else(|| format!("unknown service type `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MessageEnvelope {
    pub kind: MsgKind,
    pub session_id: String,
    pub service: ServiceType,
    pub request_id: u64,
    pub timestamp_us: u64,
    pub payload: Bytes,
}

impl MessageEnvelope {
    pub fn new(kind: MsgKind, service: ServiceType, session_id: impl Into<String>) -> Self {
        MessageEnvelope {
            kind,
            session_id: session_id.into(),
            service,
            request_id: 0,
            timestamp_us: crate::clock::now_us(),
            payload: Bytes::new(),
        }
    }

    pub fn heartbeat(service: ServiceType) -> Self {
        Self::new(MsgKind::Heartbeat, service, "")
    }

    pub fn with_request_id(mut self, request_id: u64) -> Self {
        self.request_id = request_id;
        self
    }

    pub fn with_payload(mut self, payload: impl Into<Bytes>) -> Self {
        self.payload = payload.into();
        self
    }

    /// Reply addressed back along the same correlation as `self`.
    pub fn reply(&self, kind: MsgKind, payload: impl Into<Bytes>) -> Self {
        MessageEnvelope {
            kind,
            session_id: self.session_id.clone(),
            service: self.service,
            request_id: self.request_id,
            timestamp_us: crate::clock::now_us(),
            payload: payload.into(),
        }
    }

    /// Checks the kind-specific invariants that the codec itself does not enforce.
    pub fn check_semantics(&self) -> Result<(), &'static str> {
        match self.kind {
            MsgKind::Request | MsgKind::Reply if self.session_id.is_empty() => {
                Err("REQUEST and REPLY require a session id")
            }
            MsgKind::Heartbeat if !self.session_id.is_empty() => {
                Err("HEARTBEAT must carry an empty session id")
            }
            _ => Ok(()),
        }
    }

    pub fn encoded_len(&self) -> usize {
        FIXED_HEADER_LEN + self.session_id.len() + self.payload.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EncodeError {
    #[error("{field} is {len} bytes, limit is {max}")]
    OversizeField { field: &'static str, len: usize, max: usize },
}

/// Decoder failures. Variants carrying `frame_len` were raised after the frame
/// boundary was established; a stream reader may skip `frame_len` bytes and
/// continue. The others leave the stream position unchanged.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("bad magic {found:02x?}")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported frame version {0}")]
    UnsupportedVersion(u8),
    #[error("truncated frame: need {needed} bytes, have {available}")]
    TruncatedFrame { needed: usize, available: usize },
    #[error("frame length mismatch: frame is {frame_len} bytes, input is {input_len}")]
    LengthMismatch { frame_len: usize, input_len: usize },
    #[error("unknown msg_kind {code}")]
    UnknownKind { code: u8, frame_len: usize },
    #[error("unknown service_type {code}")]
    UnknownService { code: u8, frame_len: usize },
    #[error("reserved flags set: {flags:#04x}")]
    ReservedFlags { flags: u8, frame_len: usize },
    #[error("session id is not valid UTF-8")]
    InvalidSessionId { frame_len: usize },
    #[error("frame of {frame_len} bytes exceeds the {limit} byte limit")]
    OversizeFrame { frame_len: usize, limit: usize },
}

impl DecodeError {
    /// Bytes a stream reader may discard to move past the offending frame.
    pub fn skippable(&self) -> Option<usize> {
        match *self {
            DecodeError::UnknownKind { frame_len, .. }
            | DecodeError::UnknownService { frame_len, .. }
            | DecodeError::ReservedFlags { frame_len, .. }
            | DecodeError::InvalidSessionId { frame_len } => Some(frame_len),
            _ => None,
        }
    }
}

pub fn encode(envelope: &MessageEnvelope) -> Result<Vec<u8>, EncodeError> {
    let mut out = Vec::with_capacity(envelope.encoded_len());
    encode_into(envelope, &mut out)?;
    Ok(out)
}

pub fn encode_into(envelope: &MessageEnvelope, out: &mut Vec<u8>) -> Result<(), EncodeError> {
    let session = envelope.session_id.as_bytes();
    if session.len() > MAX_SESSION_ID_LEN {
        return Err(EncodeError::OversizeField {
            field: "session_id",
            len: session.len(),
            max: MAX_SESSION_ID_LEN,
        });
    }
    if envelope.payload.len() > MAX_PAYLOAD_LEN {
        return Err(EncodeError::OversizeField {
            field: "payload",
            len: envelope.payload.len(),
            max: MAX_PAYLOAD_LEN,
        });
    }
    out.reserve(envelope.encoded_len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(envelope.kind.code());
    out.push(envelope.service.code());
    out.push(0);
    out.extend_from_slice(&envelope.request_id.to_le_bytes());
    out.extend_from_slice(&envelope.timestamp_us.to_le_bytes());
    out.push(session.len() as u8);
    out.extend_from_slice(session);
    out.extend_from_slice(&(envelope.payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&envelope.payload);
    Ok(())
}

/// Total length of the frame at the start of `bytes`, once enough of it is
/// present to tell. Validates magic and version on the way.
pub fn frame_len(bytes: &[u8]) -> Result<usize, DecodeError> {
    let magic_avail = bytes.len().min(MAGIC.len());
    if bytes[..magic_avail] != MAGIC[..magic_avail] {
        return Err(DecodeError::BadMagic { found: bytes[..magic_avail].to_vec() });
    }
    if bytes.len() > 4 && bytes[4] != VERSION {
        return Err(DecodeError::UnsupportedVersion(bytes[4]));
    }
    if bytes.len() <= SESSION_LEN_OFFSET {
        return Err(DecodeError::TruncatedFrame {
            needed: SESSION_LEN_OFFSET + 1,
            available: bytes.len(),
        });
    }
    let session_len = bytes[SESSION_LEN_OFFSET] as usize;
    let payload_len_at = SESSION_LEN_OFFSET + 1 + session_len;
    if bytes.len() < payload_len_at + 4 {
        return Err(DecodeError::TruncatedFrame {
            needed: payload_len_at + 4,
            available: bytes.len(),
        });
    }
    let mut len_bytes = [0u8; 4];
    len_bytes.copy_from_slice(&bytes[payload_len_at..payload_len_at + 4]);
    let payload_len = u32::from_le_bytes(len_bytes) as usize;
    Ok(FIXED_HEADER_LEN + session_len + payload_len)
}

/// Decodes the first frame in `bytes`, returning it with the number of bytes
/// consumed. Trailing bytes are left for the next call.
pub fn decode(bytes: &[u8]) -> Result<(MessageEnvelope, usize), DecodeError> {
    let total = frame_len(bytes)?;
    if bytes.len() < total {
        return Err(DecodeError::TruncatedFrame { needed: total, available: bytes.len() });
    }
    let frame = &bytes[..total];
    let kind = MsgKind::from_code(frame[5])
        .ok_or(DecodeError::UnknownKind { code: frame[5], frame_len: total })?;
    let service = ServiceType::from_code(frame[6])
        .ok_or(DecodeError::UnknownService { code: frame[6], frame_len: total })?;
    if frame[7] != 0 {
        return Err(DecodeError::ReservedFlags { flags: frame[7], frame_len: total });
    }
    let request_id = u64::from_le_bytes(frame[8..16].try_into().expect("8 bytes"));
    let timestamp_us = u64::from_le_bytes(frame[16..24].try_into().expect("8 bytes"));
    let session_len = frame[SESSION_LEN_OFFSET] as usize;
    let session_start = SESSION_LEN_OFFSET + 1;
    let session_id = std::str::from_utf8(&frame[session_start..session_start + session_len])
        .map_err(|_| DecodeError::InvalidSessionId { frame_len: total })?
        .to_owned();
    let payload_start = session_start + session_len + 4;
    let payload = Bytes::copy_from_slice(&frame[payload_start..total]);
    Ok((
        MessageEnvelope { kind, session_id, service, request_id, timestamp_us, payload },
        total,
    ))
}

/// Decodes a buffer that must hold exactly one frame.
pub fn decode_exact(bytes: &[u8]) -> Result<MessageEnvelope, DecodeError> {
    let (envelope, used) = decode(bytes)?;
    if used != bytes.len() {
        return Err(DecodeError::LengthMismatch { frame_len: used, input_len: bytes.len() });
    }
    Ok(envelope)
}

/// Incremental decoder over a byte stream.
#[derive(Debug)]
pub struct FrameReader {
    buf: BytesMut,
    max_frame: usize,
}

impl FrameReader {
    pub fn new(max_frame: usize) -> Self {
        FrameReader { buf: BytesMut::with_capacity(8 * 1024), max_frame }
    }

    pub fn buffer_mut(&mut self) -> &mut BytesMut {
        &mut self.buf
    }

    pub fn extend(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }

    /// `Ok(None)` means more bytes are needed.
    pub fn next_frame(&mut self) -> Result<Option<MessageEnvelope>, DecodeError> {
        if self.buf.is_empty() {
            return Ok(None);
        }
        match frame_len(&self.buf) {
            Ok(len) if len > self.max_frame => {
                return Err(DecodeError::OversizeFrame { frame_len: len, limit: self.max_frame })
            }
            Ok(_) => {}
            Err(DecodeError::TruncatedFrame { .. }) => return Ok(None),
            Err(e) => return Err(e),
        }
        match decode(&self.buf) {
            Ok((envelope, used)) => {
                self.buf.advance(used);
                Ok(Some(envelope))
            }
            Err(DecodeError::TruncatedFrame { .. }) => Ok(None),
            Err(e) => {
                if let Some(skip) = e.skippable() {
                    self.buf.advance(skip);
                }
                Err(e)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> MessageEnvelope {
        MessageEnvelope {
            kind: MsgKind::Request,
            session_id: "s1".into(),
            service: ServiceType::Asr,
            request_id: 7,
            timestamp_us: 1_700_000_000_000_000,
            payload: Bytes::from_static(b"hi"),
        }
    }

    #[test]
    fn empty_heartbeat_is_fixed_header_size() {
        let hb = MessageEnvelope { timestamp_us: 0, ..MessageEnvelope::heartbeat(ServiceType::Control) };
        let frame = encode(&hb).unwrap();
        assert_eq!(frame.len(), FIXED_HEADER_LEN);
        assert_eq!(&frame[..4], b"AMF1");
        assert_eq!(frame[4], 1);
        assert_eq!(frame[24], 0);
        assert_eq!(&frame[25..29], &[0, 0, 0, 0]);
    }

    #[test]
    fn request_round_trips() {
        let env = sample();
        let frame = encode(&env).unwrap();
        assert_eq!(decode_exact(&frame).unwrap(), env);
    }

    #[test]
    fn byte_layout_is_exact() {
        let frame = encode(&sample()).unwrap();
        let mut expected = b"AMF1".to_vec();
        expected.extend_from_slice(&[1, MsgKind::Request.code(), ServiceType::Asr.code(), 0]);
        expected.extend_from_slice(&7u64.to_le_bytes());
        expected.extend_from_slice(&1_700_000_000_000_000u64.to_le_bytes());
        expected.push(2);
        expected.extend_from_slice(b"s1");
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(b"hi");
        assert_eq!(frame, expected);
    }

    #[test]
    fn bad_magic() {
        let mut frame = encode(&sample()).unwrap();
        frame[0] = b'X';
        assert!(matches!(decode(&frame), Err(DecodeError::BadMagic { .. })));
        assert!(matches!(decode(b"AM"), Err(DecodeError::TruncatedFrame { .. })));
        assert!(matches!(decode(b"AX"), Err(DecodeError::BadMagic { .. })));
    }

    #[test]
    fn truncated_by_one_byte() {
        let frame = encode(&sample()).unwrap();
        let err = decode(&frame[..frame.len() - 1]).unwrap_err();
        assert_eq!(err, DecodeError::TruncatedFrame { needed: frame.len(), available: frame.len() - 1 });
    }

    #[test]
    fn version_and_kind_checks() {
        let mut frame = encode(&sample()).unwrap();
        frame[4] = 2;
        assert_eq!(decode(&frame).unwrap_err(), DecodeError::UnsupportedVersion(2));
        let mut frame = encode(&sample()).unwrap();
        frame[5] = 200;
        assert!(matches!(decode(&frame), Err(DecodeError::UnknownKind { code: 200, .. })));
        let mut frame = encode(&sample()).unwrap();
        frame[7] = 1;
        assert!(matches!(decode(&frame), Err(DecodeError::ReservedFlags { .. })));
    }

    #[test]
    fn trailing_bytes_are_a_length_mismatch_for_exact_decode() {
        let mut frame = encode(&sample()).unwrap();
        let len = frame.len();
        frame.push(0);
        assert_eq!(
            decode_exact(&frame).unwrap_err(),
            DecodeError::LengthMismatch { frame_len: len, input_len: len + 1 }
        );
        assert_eq!(decode(&frame).unwrap().1, len);
    }

    #[test]
    fn oversize_session_rejected() {
        let mut env = sample();
        env.session_id = "x".repeat(256);
        assert!(matches!(encode(&env), Err(EncodeError::OversizeField { field: "session_id", .. })));
        env.session_id = "x".repeat(255);
        assert!(encode(&env).is_ok());
    }

    #[test]
    fn reader_handles_split_and_concatenated_frames() {
        let a = encode(&sample()).unwrap();
        let mut b_env = sample();
        b_env.request_id = 8;
        let b = encode(&b_env).unwrap();
        let mut stream = a.clone();
        stream.extend_from_slice(&b);
        let mut reader = FrameReader::new(1 << 20);
        reader.extend(&stream[..10]);
        assert_eq!(reader.next_frame().unwrap(), None);
        reader.extend(&stream[10..]);
        assert_eq!(reader.next_frame().unwrap().unwrap().request_id, 7);
        assert_eq!(reader.next_frame().unwrap().unwrap().request_id, 8);
        assert_eq!(reader.next_frame().unwrap(), None);
    }

    #[test]
    fn reader_skips_frames_with_unknown_kind() {
        let mut bad = encode(&sample()).unwrap();
        bad[5] = 99;
        let good = encode(&sample()).unwrap();
        let mut reader = FrameReader::new(1 << 20);
        reader.extend(&bad);
        reader.extend(&good);
        assert!(reader.next_frame().is_err());
        assert_eq!(reader.next_frame().unwrap().unwrap(), sample());
    }

    #[test]
    fn reader_limits_frame_size() {
        let mut env = sample();
        env.payload = Bytes::from(vec![0u8; 2048]);
        let mut reader = FrameReader::new(1024);
        reader.extend(&encode(&env).unwrap()[..40]);
        assert!(matches!(reader.next_frame(), Err(DecodeError::OversizeFrame { .. })));
    }

    #[test]
    fn semantic_checks() {
        let mut env = sample();
        assert!(env.check_semantics().is_ok());
        env.session_id.clear();
        assert!(env.check_semantics().is_err());
        let mut hb = MessageEnvelope::heartbeat(ServiceType::Asr);
        assert!(hb.check_semantics().is_ok());
        hb.session_id = "s".into();
        assert!(hb.check_semantics().is_err());
    }

    #[test]
    fn service_names_parse() {
        for svc in ServiceType::ALL {
            assert_eq!(svc.name().parse::<ServiceType>().unwrap(), svc);
        }
        assert!("nope".parse::<ServiceType>().is_err());
    }
}

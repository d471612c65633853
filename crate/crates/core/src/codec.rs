//! Canonical byte layouts.
//!
//! Parameter vector:
//!
//! ```text
//! rank: u32 LE | dim_0 .. dim_{rank-1}: u64 LE | values: f32 LE, row-major
//! ```
//!
//! Envelope (also the TCP wire format inside a frame):
//!
//! ```text
//! "PQFL" | version u8 = 1 | msg_type u8 | scheme u8 | round u32 | sender u32 |
//! payload_len u64 | payload | sig_len u32 | signature
//! ```
//!
//! All integers little-endian. The signature always covers the 23 header
//! bytes followed by the payload.

use thiserror::Error;

use crate::sig::{SchemeId, SignatureBytes};

pub const MAGIC: [u8; 4] = *b"PQFL";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 23;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("non-finite value at index {index}")]
    NonFiniteValue { index: usize },
    #[error("malformed parameter payload: {0}")]
    MalformedPayload(String),
    #[error("malformed envelope: {0}")]
    MalformedEnvelope(String),
    #[error("shape {shape:?} holds {expected} values, got {actual}")]
    ShapeMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
}

/// Flat `f32` values with a row-major shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    shape: Vec<usize>,
    values: Vec<f32>,
}

impl ParameterVector {
    pub fn new(shape: Vec<usize>, values: Vec<f32>) -> Result<Self, CodecError> {
        let expected = shape_len(&shape).ok_or_else(|| {
            CodecError::MalformedPayload(format!("invalid shape {shape:?}"))
        })?;
        if expected != values.len() {
            return Err(CodecError::ShapeMismatch {
                shape,
                expected,
                actual: values.len(),
            });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(CodecError::NonFiniteValue { index });
        }
        Ok(Self { shape, values })
    }

    /// Rank-1 vector.
    pub fn from_flat(values: Vec<f32>) -> Result<Self, CodecError> {
        Self::new(vec![values.len()], values)
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self, CodecError> {
        let n = shape_len(&shape)
            .ok_or_else(|| CodecError::MalformedPayload(format!("invalid shape {shape:?}")))?;
        Self::new(shape, vec![0.0; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    /// Bitwise equality; unlike `==` this tells `0.0` from `-0.0`.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self.values.len() == other.values.len()
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn encoded_len(&self) -> usize {
        4 + 8 * self.shape.len() + 4 * self.values.len()
    }
}

fn shape_len(shape: &[usize]) -> Option<usize> {
    if shape.is_empty() || shape.contains(&0) {
        return None;
    }
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

pub fn encode_params(p: &ParameterVector) -> Result<Vec<u8>, CodecError> {
    if let Some(index) = p.values.iter().position(|v| !v.is_finite()) {
        return Err(CodecError::NonFiniteValue { index });
    }
    let mut out = Vec::with_capacity(p.encoded_len());
    out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
    for &d in &p.shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in &p.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_params(bytes: &[u8]) -> Result<ParameterVector, CodecError> {
    let malformed = |m: &str| CodecError::MalformedPayload(m.to_string());
    let mut r = Reader::new(bytes);
    let rank = r.u32().ok_or_else(|| malformed("missing rank"))? as usize;
    if rank == 0 {
        return Err(malformed("rank 0"));
    }
    if rank > r.remaining() / 8 {
        return Err(malformed("rank exceeds buffer"));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = r.u64().ok_or_else(|| malformed("truncated shape"))?;
        let d = usize::try_from(d).map_err(|_| malformed("dimension overflow"))?;
        if d == 0 {
            return Err(malformed("zero dimension"));
        }
        shape.push(d);
    }
    let count = shape_len(&shape).ok_or_else(|| malformed("element count overflow"))?;
    let expected_bytes = count
        .checked_mul(4)
        .ok_or_else(|| malformed("element count overflow"))?;
    if r.remaining() != expected_bytes {
        return Err(CodecError::MalformedPayload(format!(
            "expected {expected_bytes} value bytes, found {}",
            r.remaining()
        )));
    }
    let values: Vec<f32> = r
        .rest()
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    if let Some(index) = values.iter().position(|v| !v.is_finite()) {
        return Err(CodecError::NonFiniteValue { index });
    }
    Ok(ParameterVector { shape, values })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MessageType {
    ModelDistribution,
    UpdateSubmission,
    PublicKeyAnnounce,
}

impl MessageType {
    pub fn code(self) -> u8 {
        match self {
            MessageType::ModelDistribution => 1,
            MessageType::UpdateSubmission => 2,
            MessageType::PublicKeyAnnounce => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(MessageType::ModelDistribution),
            2 => Some(MessageType::UpdateSubmission),
            3 => Some(MessageType::PublicKeyAnnounce),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MessageHeader {
    pub msg_type: MessageType,
    pub scheme: SchemeId,
    pub round: u32,
    pub sender_id: u32,
    pub payload_len: u64,
}

impl MessageHeader {
    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[0..4].copy_from_slice(&MAGIC);
        out[4] = VERSION;
        out[5] = self.msg_type.code();
        out[6] = self.scheme.code();
        out[7..11].copy_from_slice(&self.round.to_le_bytes());
        out[11..15].copy_from_slice(&self.sender_id.to_le_bytes());
        out[15..23].copy_from_slice(&self.payload_len.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        let bad = |m: String| CodecError::MalformedEnvelope(m);
        if bytes.len() < HEADER_LEN {
            return Err(bad(format!("header needs {HEADER_LEN} bytes, got {}", bytes.len())));
        }
        if bytes[0..4] != MAGIC {
            return Err(bad(format!("bad magic {:?}", &bytes[0..4])));
        }
        if bytes[4] != VERSION {
            return Err(bad(format!("unsupported version {}", bytes[4])));
        }
        let msg_type =
            MessageType::from_code(bytes[5]).ok_or_else(|| bad(format!("unknown msg_type {}", bytes[5])))?;
        let scheme = SchemeId::from_code(bytes[6]).map_err(|e| bad(e.to_string()))?;
        let le32 = |r: std::ops::Range<usize>| u32::from_le_bytes(bytes[r].try_into().expect("4 bytes"));
        Ok(MessageHeader {
            msg_type,
            scheme,
            round: le32(7..11),
            sender_id: le32(11..15),
            payload_len: u64::from_le_bytes(bytes[15..23].try_into().expect("8 bytes")),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignedEnvelope {
    pub header: MessageHeader,
    pub payload: Vec<u8>,
    pub signature: SignatureBytes,
}

impl SignedEnvelope {
    pub fn signed_bytes(&self) -> Vec<u8> {
        signed_bytes(&self.header, &self.payload)
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.payload.len() + 4 + self.signature.len()
    }
}

/// The exact byte string handed to `sign`/`verify`: header ‖ payload.
pub fn signed_bytes(header: &MessageHeader, payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(&header.encode());
    out.extend_from_slice(payload);
    out
}

pub fn encode_envelope(e: &SignedEnvelope) -> Result<Vec<u8>, CodecError> {
    if e.header.payload_len != e.payload.len() as u64 {
        return Err(CodecError::MalformedEnvelope(format!(
            "header payload_len {} but payload has {} bytes",
            e.header.payload_len,
            e.payload.len()
        )));
    }
    let sig_len = u32::try_from(e.signature.len())
        .map_err(|_| CodecError::MalformedEnvelope("signature too long".into()))?;
    let mut out = Vec::with_capacity(e.encoded_len());
    out.extend_from_slice(&e.header.encode());
    out.extend_from_slice(&e.payload);
    out.extend_from_slice(&sig_len.to_le_bytes());
    out.extend_from_slice(&e.signature.bytes);
    Ok(out)
}

pub fn decode_envelope(bytes: &[u8]) -> Result<SignedEnvelope, CodecError> {
    let header = MessageHeader::decode(bytes)?;
    let bad = |m: String| CodecError::MalformedEnvelope(m);
    let rest = &bytes[HEADER_LEN..];
    let payload_len = usize::try_from(header.payload_len)
        .ok()
        .filter(|&n| n <= rest.len())
        .ok_or_else(|| bad(format!("payload_len {} exceeds buffer", header.payload_len)))?;
    let (payload, rest) = rest.split_at(payload_len);
    if rest.len() < 4 {
        return Err(bad("missing signature length".into()));
    }
    let sig_len = u32::from_le_bytes(rest[..4].try_into().expect("4 bytes")) as usize;
    let sig = &rest[4..];
    if sig.len() != sig_len {
        return Err(bad(format!(
            "signature length {sig_len} but {} bytes follow",
            sig.len()
        )));
    }
    Ok(SignedEnvelope {
        signature: SignatureBytes {
            scheme: header.scheme,
            bytes: sig.to_vec(),
        },
        header,
        payload: payload.to_vec(),
    })
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.buf.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn rest(&mut self) -> &'a [u8] {
        let s = &self.buf[self.pos..];
        self.pos = self.buf.len();
        s
    }
}

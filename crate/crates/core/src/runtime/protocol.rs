//! Wire format. Every frame is a 13-byte header followed by `size` bytes:
//!
//! ```text
//! msg_type  u8      0x00 scheduling, 0x01 task, 0x02 result
//! task_id   u64 BE
//! size      u32 BE  bytes that follow: flag byte + body
//! flag      u8      0x00 raw, 0x01 raw DEFLATE stream
//! body      size-1 bytes
//! ```
//!
//! Payloads of [`COMPRESS_THRESHOLD`] bytes or more are compressed. See
//! `docs/protocol.md` for the scheduling subtypes and task bodies.

use std::io::{self, Read, Write};

use flate2::read::DeflateDecoder;
use flate2::write::DeflateEncoder;
use flate2::Compression;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{DeviceProfile, Scheme, Strategy};

pub const HEADER_LEN: usize = 13;
pub const COMPRESS_THRESHOLD: usize = 256;
pub const FLAG_RAW: u8 = 0x00;
pub const FLAG_DEFLATE: u8 = 0x01;
/// Largest decompressed payload accepted from the wire.
pub const MAX_PAYLOAD: usize = 256 << 20;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("truncated frame: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("unknown message type 0x{0:02x}")]
    UnknownType(u8),
    #[error("unknown compression flag 0x{0:02x}")]
    UnknownFlag(u8),
    #[error("size field says {declared} bytes, frame carries {actual}")]
    SizeMismatch { declared: usize, actual: usize },
    #[error("payload of {0} bytes does not fit the size field")]
    TooLarge(usize),
    #[error("decompression failed: {0}")]
    Decompress(String),
    #[error("unknown scheduling subtype 0x{0:02x}")]
    UnknownSubtype(u8),
    #[error("bad message body: {0}")]
    Body(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum MsgType {
    Scheduling = 0x00,
    Task = 0x01,
    Result = 0x02,
}

impl TryFrom<u8> for MsgType {
    type Error = ProtocolError;

    fn try_from(b: u8) -> Result<Self, ProtocolError> {
        match b {
            0x00 => Ok(MsgType::Scheduling),
            0x01 => Ok(MsgType::Task),
            0x02 => Ok(MsgType::Result),
            other => Err(ProtocolError::UnknownType(other)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MessageHeader {
    pub msg_type: MsgType,
    pub task_id: u64,
    /// Flag byte plus body, as sent.
    pub size: u32,
}

impl MessageHeader {
    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[0] = self.msg_type as u8;
        out[1..9].copy_from_slice(&self.task_id.to_be_bytes());
        out[9..13].copy_from_slice(&self.size.to_be_bytes());
        out
    }

    pub fn parse(bytes: &[u8; HEADER_LEN]) -> Result<Self, ProtocolError> {
        Ok(Self {
            msg_type: MsgType::try_from(bytes[0])?,
            task_id: u64::from_be_bytes(bytes[1..9].try_into().expect("8 bytes")),
            size: u32::from_be_bytes(bytes[9..13].try_into().expect("4 bytes")),
        })
    }
}

/// A decoded frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub msg_type: MsgType,
    pub task_id: u64,
    pub payload: Vec<u8>,
}

impl Message {
    pub fn new(msg_type: MsgType, task_id: u64, payload: Vec<u8>) -> Self {
        Self {
            msg_type,
            task_id,
            payload,
        }
    }
}

fn body_of(payload: &[u8]) -> Result<(u8, Vec<u8>), ProtocolError> {
    if payload.len() < COMPRESS_THRESHOLD {
        return Ok((FLAG_RAW, payload.to_vec()));
    }
    let mut enc = DeflateEncoder::new(Vec::with_capacity(payload.len() / 2), Compression::fast());
    enc.write_all(payload)?;
    Ok((FLAG_DEFLATE, enc.finish()?))
}

pub fn encode_message(msg_type: MsgType, task_id: u64, payload: &[u8]) -> Result<Vec<u8>, ProtocolError> {
    let (flag, body) = body_of(payload)?;
    let size = u32::try_from(body.len() + 1).map_err(|_| ProtocolError::TooLarge(body.len()))?;
    let header = MessageHeader {
        msg_type,
        task_id,
        size,
    };
    let mut out = Vec::with_capacity(HEADER_LEN + 1 + body.len());
    out.extend_from_slice(&header.to_bytes());
    out.push(flag);
    out.extend_from_slice(&body);
    Ok(out)
}

fn unpack(flag: u8, body: &[u8]) -> Result<Vec<u8>, ProtocolError> {
    match flag {
        FLAG_RAW => Ok(body.to_vec()),
        FLAG_DEFLATE => {
            let mut out = Vec::new();
            DeflateDecoder::new(body)
                .take(MAX_PAYLOAD as u64 + 1)
                .read_to_end(&mut out)
                .map_err(|e| ProtocolError::Decompress(e.to_string()))?;
            if out.len() > MAX_PAYLOAD {
                return Err(ProtocolError::Decompress("payload exceeds limit".into()));
            }
            Ok(out)
        }
        other => Err(ProtocolError::UnknownFlag(other)),
    }
}

/// Decodes exactly one frame occupying all of `bytes`.
pub fn decode_message(bytes: &[u8]) -> Result<(MessageHeader, Vec<u8>), ProtocolError> {
    let head: &[u8; HEADER_LEN] = bytes
        .get(..HEADER_LEN)
        .and_then(|h| h.try_into().ok())
        .ok_or(ProtocolError::Truncated {
            need: HEADER_LEN,
            have: bytes.len(),
        })?;
    let header = MessageHeader::parse(head)?;
    let declared = header.size as usize;
    let actual = bytes.len() - HEADER_LEN;
    if actual < declared {
        return Err(ProtocolError::Truncated {
            need: HEADER_LEN + declared,
            have: bytes.len(),
        });
    }
    if actual > declared || declared == 0 {
        return Err(ProtocolError::SizeMismatch { declared, actual });
    }
    let payload = unpack(bytes[HEADER_LEN], &bytes[HEADER_LEN + 1..])?;
    Ok((header, payload))
}

pub fn write_message<W: Write>(w: &mut W, msg: &Message) -> Result<(), ProtocolError> {
    w.write_all(&encode_message(msg.msg_type, msg.task_id, &msg.payload)?)?;
    w.flush()?;
    Ok(())
}

/// Reads one frame. `Ok(None)` on a clean end of stream before a header.
pub fn read_message<R: Read>(r: &mut R) -> Result<Option<Message>, ProtocolError> {
    let mut head = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match r.read(&mut head[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(ProtocolError::Truncated { need: HEADER_LEN, have: got }),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let header = MessageHeader::parse(&head)?;
    let size = header.size as usize;
    if size == 0 {
        return Err(ProtocolError::SizeMismatch { declared: 0, actual: 0 });
    }
    if size > MAX_PAYLOAD + 1 {
        return Err(ProtocolError::TooLarge(size));
    }
    let mut rest = vec![0u8; size];
    r.read_exact(&mut rest).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => ProtocolError::Truncated {
            need: HEADER_LEN + size,
            have: HEADER_LEN,
        },
        _ => e.into(),
    })?;
    let payload = unpack(rest[0], &rest[1..])?;
    Ok(Some(Message::new(header.msg_type, header.task_id, payload)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum Subtype {
    Start = 0x00,
    Pause = 0x01,
    SchemeUpdate = 0x02,
    Register = 0x03,
    RegisterAck = 0x04,
}

impl TryFrom<u8> for Subtype {
    type Error = ProtocolError;

    fn try_from(b: u8) -> Result<Self, ProtocolError> {
        match b {
            0x00 => Ok(Subtype::Start),
            0x01 => Ok(Subtype::Pause),
            0x02 => Ok(Subtype::SchemeUpdate),
            0x03 => Ok(Subtype::Register),
            0x04 => Ok(Subtype::RegisterAck),
            other => Err(ProtocolError::UnknownSubtype(other)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Registration {
    pub device: DeviceProfile,
    pub model_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegisterAck {
    pub device_id: String,
    pub accepted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

/// Body of a scheduling frame. The JSON is serde's canonical output:
/// fixed field order, no whitespace.
#[derive(Debug, Clone, PartialEq)]
pub enum SchedulingPayload {
    Start,
    Pause,
    SchemeUpdate(Scheme),
    Register(Registration),
    RegisterAck(RegisterAck),
}

impl SchedulingPayload {
    pub fn subtype(&self) -> Subtype {
        match self {
            SchedulingPayload::Start => Subtype::Start,
            SchedulingPayload::Pause => Subtype::Pause,
            SchedulingPayload::SchemeUpdate(_) => Subtype::SchemeUpdate,
            SchedulingPayload::Register(_) => Subtype::Register,
            SchedulingPayload::RegisterAck(_) => Subtype::RegisterAck,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let body = match self {
            SchedulingPayload::Start | SchedulingPayload::Pause => Ok(Vec::new()),
            SchedulingPayload::SchemeUpdate(s) => serde_json::to_vec(s),
            SchedulingPayload::Register(r) => serde_json::to_vec(r),
            SchedulingPayload::RegisterAck(a) => serde_json::to_vec(a),
        }
        .expect("plain data serializes");
        let mut out = Vec::with_capacity(1 + body.len());
        out.push(self.subtype() as u8);
        out.extend_from_slice(&body);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ProtocolError> {
        let (&sub, body) = bytes
            .split_first()
            .ok_or_else(|| ProtocolError::Body("empty scheduling payload".into()))?;
        let json = |e: serde_json::Error| ProtocolError::Body(e.to_string());
        Ok(match Subtype::try_from(sub)? {
            Subtype::Start | Subtype::Pause if !body.is_empty() => {
                return Err(ProtocolError::Body("start/pause carry no body".into()))
            }
            Subtype::Start => SchedulingPayload::Start,
            Subtype::Pause => SchedulingPayload::Pause,
            Subtype::SchemeUpdate => SchedulingPayload::SchemeUpdate(serde_json::from_slice(body).map_err(json)?),
            Subtype::Register => SchedulingPayload::Register(serde_json::from_slice(body).map_err(json)?),
            Subtype::RegisterAck => SchedulingPayload::RegisterAck(serde_json::from_slice(body).map_err(json)?),
        })
    }

    /// Registration and other session-level frames use task id 0.
    pub fn to_message(&self) -> Message {
        Message::new(MsgType::Scheduling, 0, self.encode())
    }
}

/// Descriptive part of a task: who sent it and how it is to be run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMeta {
    pub id: u64,
    pub device_type: String,
    pub source: String,
    /// `"infer"` for normal tasks.
    pub task_type: String,
    /// Milliseconds since the device session started.
    pub arrival_ms: f64,
    pub model: String,
    /// The strategy this task runs under, fixed at issue time.
    pub strategy: Strategy,
    /// Tag of the scheme in force when the task was issued.
    pub scheme: String,
}

/// A task as carried by a Task frame: meta and opaque task data.
///
/// Encoding: `u32 BE` meta length, meta as JSON, then the data bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskBlock {
    pub meta: TaskMeta,
    pub data: Vec<u8>,
}

impl TaskBlock {
    pub fn encode(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.meta).expect("plain data serializes");
        let mut out = Vec::with_capacity(4 + meta.len() + self.data.len());
        out.extend_from_slice(&(meta.len() as u32).to_be_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&self.data);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ProtocolError> {
        let len = bytes
            .get(..4)
            .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")) as usize)
            .ok_or(ProtocolError::Truncated { need: 4, have: bytes.len() })?;
        let meta_bytes = bytes.get(4..4 + len).ok_or(ProtocolError::Truncated {
            need: 4 + len,
            have: bytes.len(),
        })?;
        let meta = serde_json::from_slice(meta_bytes).map_err(|e| ProtocolError::Body(e.to_string()))?;
        Ok(Self {
            meta,
            data: bytes[4 + len..].to_vec(),
        })
    }
}

/// Graph payload of a task: node features and edge list.
///
/// Encoding, all big-endian: `u32` node count, `u32` feature dim, node-major
/// `f32` features, `u32` edge count, then `u32` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub feature_dim: u32,
    pub features: Vec<f32>,
    pub edges: Vec<(u32, u32)>,
}

impl TaskData {
    pub fn node_count(&self) -> u32 {
        if self.feature_dim == 0 {
            0
        } else {
            (self.features.len() / self.feature_dim as usize) as u32
        }
    }

    pub fn encoded_len(&self) -> usize {
        12 + 4 * self.features.len() + 8 * self.edges.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&self.node_count().to_be_bytes());
        out.extend_from_slice(&self.feature_dim.to_be_bytes());
        for f in &self.features {
            out.extend_from_slice(&f.to_be_bytes());
        }
        out.extend_from_slice(&(self.edges.len() as u32).to_be_bytes());
        for (a, b) in &self.edges {
            out.extend_from_slice(&a.to_be_bytes());
            out.extend_from_slice(&b.to_be_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ProtocolError> {
        let mut pos = 0;
        let u32_at = |pos: &mut usize| -> Result<u32, ProtocolError> {
            let b = bytes.get(*pos..*pos + 4).ok_or(ProtocolError::Truncated {
                need: *pos + 4,
                have: bytes.len(),
            })?;
            *pos += 4;
            Ok(u32::from_be_bytes(b.try_into().expect("4 bytes")))
        };
        let nodes = u32_at(&mut pos)? as usize;
        let dim = u32_at(&mut pos)?;
        let n_feat = nodes
            .checked_mul(dim as usize)
            .filter(|n| n * 4 <= bytes.len())
            .ok_or_else(|| ProtocolError::Body("feature block larger than payload".into()))?;
        let mut features = Vec::with_capacity(n_feat);
        for _ in 0..n_feat {
            features.push(f32::from_bits(u32_at(&mut pos)?));
        }
        let n_edges = u32_at(&mut pos)? as usize;
        if n_edges * 8 > bytes.len() - pos {
            return Err(ProtocolError::Truncated {
                need: pos + n_edges * 8,
                have: bytes.len(),
            });
        }
        let mut edges = Vec::with_capacity(n_edges);
        for _ in 0..n_edges {
            edges.push((u32_at(&mut pos)?, u32_at(&mut pos)?));
        }
        if pos != bytes.len() {
            return Err(ProtocolError::SizeMismatch {
                declared: pos,
                actual: bytes.len(),
            });
        }
        Ok(Self {
            feature_dim: dim,
            features,
            edges,
        })
    }

    /// Synthetic point-cloud-like payload of roughly `bytes` bytes: a ring of
    /// nodes with `dim` features each, deterministic in `seed`.
    pub fn synthetic(bytes: usize, dim: u32, seed: u64) -> Self {
        let dim = dim.max(1);
        let per_node = 4 * dim as usize + 8;
        let nodes = (bytes.saturating_sub(12) / per_node).max(1) as u32;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let features = (0..nodes as usize * dim as usize).map(|_| rng.random::<f32>()).collect();
        let edges = (0..nodes).map(|i| (i, (i + 1) % nodes)).collect();
        Self {
            feature_dim: dim,
            features,
            edges,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert_eq, prop_oneof, proptest, Just};

    #[test]
    fn hello_frame_bytes() {
        let frame = encode_message(MsgType::Task, 1, b"hello").unwrap();
        let expected = [
            0x01, 0, 0, 0, 0, 0, 0, 0, 0x01, 0, 0, 0, 0x06, 0x00, 0x68, 0x65, 0x6C, 0x6C, 0x6F,
        ];
        assert_eq!(frame, expected);
        let (h, p) = decode_message(&frame).unwrap();
        assert_eq!((h.msg_type, h.task_id, h.size), (MsgType::Task, 1, 6));
        assert_eq!(p, b"hello");
    }

    #[test]
    fn unknown_type_is_rejected() {
        let mut frame = encode_message(MsgType::Task, 1, b"hello").unwrap();
        frame[0] = 0x07;
        let err = decode_message(&frame).unwrap_err();
        assert!(matches!(err, ProtocolError::UnknownType(0x07)));
        assert!(err.to_string().contains("unknown message type"));
    }

    #[test]
    fn megabyte_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let payload: Vec<u8> = (0..1 << 20).map(|_| rng.random()).collect();
        let frame = encode_message(MsgType::Result, 42, &payload).unwrap();
        assert_eq!(frame[HEADER_LEN], FLAG_DEFLATE);
        let (_, back) = decode_message(&frame).unwrap();
        assert_eq!(back, payload);
    }

    #[test]
    fn threshold_selects_flag() {
        let small = encode_message(MsgType::Task, 0, &[7u8; COMPRESS_THRESHOLD - 1]).unwrap();
        let large = encode_message(MsgType::Task, 0, &[7u8; COMPRESS_THRESHOLD]).unwrap();
        assert_eq!(small[HEADER_LEN], FLAG_RAW);
        assert_eq!(large[HEADER_LEN], FLAG_DEFLATE);
        assert!(large.len() < small.len());
    }

    #[test]
    fn malformed_frames() {
        let frame = encode_message(MsgType::Task, 3, b"abc").unwrap();
        assert!(matches!(decode_message(&frame[..5]), Err(ProtocolError::Truncated { .. })));
        assert!(matches!(decode_message(&frame[..frame.len() - 1]), Err(ProtocolError::Truncated { .. })));
        let mut long = frame.clone();
        long.push(0);
        assert!(matches!(decode_message(&long), Err(ProtocolError::SizeMismatch { .. })));
        let mut bad_flag = frame.clone();
        bad_flag[HEADER_LEN] = 9;
        assert!(matches!(decode_message(&bad_flag), Err(ProtocolError::UnknownFlag(9))));
        let mut bad_body = encode_message(MsgType::Task, 3, &[1u8; 400]).unwrap();
        let n = bad_body.len();
        bad_body[HEADER_LEN + 1..n].fill(0xff);
        assert!(matches!(decode_message(&bad_body), Err(ProtocolError::Decompress(_))));
    }

    #[test]
    fn stream_read_write() {
        let mut buf = Vec::new();
        let a = Message::new(MsgType::Scheduling, 0, SchedulingPayload::Start.encode());
        let b = Message::new(MsgType::Task, 9, vec![5u8; 1000]);
        write_message(&mut buf, &a).unwrap();
        write_message(&mut buf, &b).unwrap();
        let mut r = &buf[..];
        assert_eq!(read_message(&mut r).unwrap(), Some(a));
        assert_eq!(read_message(&mut r).unwrap(), Some(b));
        assert_eq!(read_message(&mut r).unwrap(), None);
        let mut cut = &buf[..HEADER_LEN + 1];
        assert!(matches!(read_message(&mut cut), Err(ProtocolError::Truncated { .. })));
    }

    #[test]
    fn scheduling_payloads_round_trip() {
        let scheme = Scheme::new([("a", Strategy::Dp), ("b", Strategy::Pp(2))]);
        let cases = vec![
            SchedulingPayload::Start,
            SchedulingPayload::Pause,
            SchedulingPayload::SchemeUpdate(scheme),
            SchedulingPayload::Register(Registration {
                device: DeviceProfile::new("a", "tx2", crate::types::Role::Client),
                model_id: "m".into(),
            }),
            SchedulingPayload::RegisterAck(RegisterAck {
                device_id: "a".into(),
                accepted: false,
                reason: Some("no".into()),
            }),
        ];
        for c in cases {
            let bytes = c.encode();
            assert_eq!(bytes[0], c.subtype() as u8);
            assert_eq!(SchedulingPayload::decode(&bytes).unwrap(), c);
        }
        assert_eq!(SchedulingPayload::Pause.encode(), vec![0x01]);
        assert!(matches!(SchedulingPayload::decode(&[0x09]), Err(ProtocolError::UnknownSubtype(9))));
        assert!(matches!(SchedulingPayload::decode(&[0x02, b'{']), Err(ProtocolError::Body(_))));
        assert!(SchedulingPayload::decode(&[0x00, b'x']).is_err());
    }

    #[test]
    fn task_block_and_data_round_trip() {
        let data = TaskData::synthetic(5000, 3, 11);
        let bytes = data.encode();
        assert_eq!(bytes.len(), data.encoded_len());
        assert!(bytes.len() <= 5000 && bytes.len() > 4000);
        assert_eq!(TaskData::decode(&bytes).unwrap(), data);
        assert!(TaskData::decode(&bytes[..bytes.len() - 1]).is_err());

        let block = TaskBlock {
            meta: TaskMeta {
                id: 77,
                device_type: "tx2".into(),
                source: "127.0.0.1:5000".into(),
                task_type: "infer".into(),
                arrival_ms: 12.5,
                model: "m".into(),
                strategy: Strategy::Pp(1),
                scheme: "a=pp1".into(),
            },
            data: bytes,
        };
        assert_eq!(TaskBlock::decode(&block.encode()).unwrap(), block);
    }

    fn any_type() -> impl proptest::strategy::Strategy<Value = MsgType> {
        prop_oneof![Just(MsgType::Scheduling), Just(MsgType::Task), Just(MsgType::Result)]
    }

    proptest! {
        #[test]
        fn frames_round_trip(
            t in any_type(),
            id in any::<u64>(),
            payload in prop_oneof![
                proptest::collection::vec(any::<u8>(), 0..COMPRESS_THRESHOLD),
                proptest::collection::vec(any::<u8>(), COMPRESS_THRESHOLD..4096),
                proptest::collection::vec(0u8..4, COMPRESS_THRESHOLD..4096),
            ],
        ) {
            let frame = encode_message(t, id, &payload).unwrap();
            let (h, back) = decode_message(&frame).unwrap();
            prop_assert_eq!(h.msg_type, t);
            prop_assert_eq!(h.task_id, id);
            prop_assert_eq!(h.size as usize, frame.len() - HEADER_LEN);
            prop_assert_eq!(back, payload);
        }
    }
}

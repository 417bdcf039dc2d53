//! Message vocabulary, binary wire codec, and byte accounting.
//!
//! Every message travels as one frame:
//!
//! ```text
//! [payload_len: u32 LE] [msg_type: u8] [payload]
//! ```
//!
//! where `payload_len` counts the type byte plus the payload. Within the
//! payload: keys and clocks are `u64` LE, counts are `u32` LE, vector
//! elements are IEEE-754 `f32` LE in index order, and every list is
//! length-prefixed with a `u32` count. A vector is `[count: u32][f32 × count]`.
//!
//! Payload bytes are accounted in three categories: embedding payload (the
//! raw `4 * D` bytes of every vector or delta moved), clock payload (the
//! 16-byte key/clock pairs of clock-check messages), and framing (everything
//! else, including frame headers, counts, keys, and dense-reduce blobs).

pub mod sim;
pub mod tcp;

use crate::cache::EvictRecord;
use crate::embedding::{ClockValue, EmbeddingKey, EmbeddingVector, UpdateDelta};
use crate::error::{Error, Result};
use serde::Serialize;

pub type FetchEntry = (EmbeddingKey, EmbeddingVector, ClockValue);
pub type ClockPair = (EmbeddingKey, ClockValue);

/// The wire-level protocol vocabulary. Every request has exactly one
/// response type; request/response pairing is FIFO per connection.
#[derive(Clone, Debug, PartialEq)]
pub enum Message {
    FetchReq { keys: Vec<EmbeddingKey> },
    FetchResp { entries: Vec<FetchEntry> },
    EvictReq { records: Vec<EvictRecord> },
    EvictAck,
    ClockCheckReq { pairs: Vec<ClockPair> },
    ClockCheckResp { pairs: Vec<ClockPair> },
    SyncReq { records: Vec<EvictRecord> },
    SyncResp { entries: Vec<FetchEntry> },
    DenseReduceReq { worker_id: u32, grads: Vec<f32> },
    DenseReduceResp { grads: Vec<f32> },
    FlushReq { records: Vec<EvictRecord> },
    FlushAck,
}

mod msg_type {
    pub const FETCH_REQ: u8 = 0x01;
    pub const FETCH_RESP: u8 = 0x02;
    pub const EVICT_REQ: u8 = 0x03;
    pub const EVICT_ACK: u8 = 0x04;
    pub const CLOCK_CHECK_REQ: u8 = 0x05;
    pub const CLOCK_CHECK_RESP: u8 = 0x06;
    pub const SYNC_REQ: u8 = 0x07;
    pub const SYNC_RESP: u8 = 0x08;
    pub const DENSE_REDUCE_REQ: u8 = 0x09;
    pub const DENSE_REDUCE_RESP: u8 = 0x0a;
    pub const FLUSH_REQ: u8 = 0x0b;
    pub const FLUSH_ACK: u8 = 0x0c;
}

impl Message {
    pub fn type_byte(&self) -> u8 {
        match self {
            Message::FetchReq { .. } => msg_type::FETCH_REQ,
            Message::FetchResp { .. } => msg_type::FETCH_RESP,
            Message::EvictReq { .. } => msg_type::EVICT_REQ,
            Message::EvictAck => msg_type::EVICT_ACK,
            Message::ClockCheckReq { .. } => msg_type::CLOCK_CHECK_REQ,
            Message::ClockCheckResp { .. } => msg_type::CLOCK_CHECK_RESP,
            Message::SyncReq { .. } => msg_type::SYNC_REQ,
            Message::SyncResp { .. } => msg_type::SYNC_RESP,
            Message::DenseReduceReq { .. } => msg_type::DENSE_REDUCE_REQ,
            Message::DenseReduceResp { .. } => msg_type::DENSE_REDUCE_RESP,
            Message::FlushReq { .. } => msg_type::FLUSH_REQ,
            Message::FlushAck => msg_type::FLUSH_ACK,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Message::FetchReq { .. } => "FetchReq",
            Message::FetchResp { .. } => "FetchResp",
            Message::EvictReq { .. } => "EvictReq",
            Message::EvictAck => "EvictAck",
            Message::ClockCheckReq { .. } => "ClockCheckReq",
            Message::ClockCheckResp { .. } => "ClockCheckResp",
            Message::SyncReq { .. } => "SyncReq",
            Message::SyncResp { .. } => "SyncResp",
            Message::DenseReduceReq { .. } => "DenseReduceReq",
            Message::DenseReduceResp { .. } => "DenseReduceResp",
            Message::FlushReq { .. } => "FlushReq",
            Message::FlushAck => "FlushAck",
        }
    }

    /// Payload bytes by category: `(embedding, clock)`.
    pub fn payload_profile(&self) -> (u64, u64) {
        match self {
            Message::FetchResp { entries } | Message::SyncResp { entries } => {
                let emb: u64 = entries.iter().map(|(_, v, _)| 4 * v.len() as u64).sum();
                (emb, 0)
            }
            Message::EvictReq { records }
            | Message::SyncReq { records }
            | Message::FlushReq { records } => {
                let emb: u64 = records.iter().map(|r| 4 * r.delta.len() as u64).sum();
                (emb, 0)
            }
            Message::ClockCheckReq { pairs } | Message::ClockCheckResp { pairs } => {
                (0, 16 * pairs.len() as u64)
            }
            _ => (0, 0),
        }
    }
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        // Reserve the frame length prefix; patched in finish().
        Self {
            buf: vec![0, 0, 0, 0],
        }
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f32s(&mut self, vs: &[f32]) {
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn vector(&mut self, vs: &[f32]) {
        self.u32(vs.len() as u32);
        self.f32s(vs);
    }

    fn finish(mut self) -> Vec<u8> {
        let len = (self.buf.len() - 4) as u32;
        self.buf[..4].copy_from_slice(&len.to_le_bytes());
        self.buf
    }
}

/// Encode a message into one complete frame.
pub fn encode(msg: &Message) -> Vec<u8> {
    let mut w = Writer::new();
    w.u8(msg.type_byte());
    match msg {
        Message::FetchReq { keys } => {
            w.u32(keys.len() as u32);
            for k in keys {
                w.u64(k.0);
            }
        }
        Message::FetchResp { entries } | Message::SyncResp { entries } => {
            w.u32(entries.len() as u32);
            for (k, v, c) in entries {
                w.u64(k.0);
                w.vector(v.values());
                w.u64(c.0);
            }
        }
        Message::EvictReq { records }
        | Message::SyncReq { records }
        | Message::FlushReq { records } => {
            w.u32(records.len() as u32);
            for r in records {
                w.u64(r.key.0);
                w.vector(r.delta.values());
                w.u64(r.c_c.0);
            }
        }
        Message::EvictAck | Message::FlushAck => {}
        Message::ClockCheckReq { pairs } | Message::ClockCheckResp { pairs } => {
            w.u32(pairs.len() as u32);
            for (k, c) in pairs {
                w.u64(k.0);
                w.u64(c.0);
            }
        }
        Message::DenseReduceReq { worker_id, grads } => {
            w.u32(*worker_id);
            w.vector(grads);
        }
        Message::DenseReduceResp { grads } => {
            w.vector(grads);
        }
    }
    w.finish()
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Frame(format!(
                "truncated payload: wanted {n} bytes at offset {}, frame has {}",
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(4 * n)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn vector(&mut self) -> Result<Vec<f32>> {
        let n = self.u32()? as usize;
        self.f32s(n)
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// Decode one frame from the head of `bytes`. Returns the message and the
/// number of bytes consumed.
pub fn decode(bytes: &[u8]) -> Result<(Message, usize)> {
    if bytes.len() < 4 {
        return Err(Error::Frame("incomplete frame: missing length prefix".into()));
    }
    let len = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
    if len == 0 {
        return Err(Error::Frame("frame length must include the type byte".into()));
    }
    if bytes.len() < 4 + len {
        return Err(Error::Frame(format!(
            "incomplete frame: declared {len} bytes, only {} available",
            bytes.len() - 4
        )));
    }
    let msg = decode_body(&bytes[4..4 + len])?;
    Ok((msg, 4 + len))
}

/// Decode a frame body (type byte + payload, without the length prefix).
pub fn decode_body(body: &[u8]) -> Result<Message> {
    let mut r = Reader { buf: body, pos: 0 };
    let ty = r.u8()?;
    let msg = match ty {
        msg_type::FETCH_REQ => {
            let n = r.u32()? as usize;
            let keys = (0..n)
                .map(|_| r.u64().map(EmbeddingKey))
                .collect::<Result<Vec<_>>>()?;
            Message::FetchReq { keys }
        }
        msg_type::FETCH_RESP | msg_type::SYNC_RESP => {
            let n = r.u32()? as usize;
            let mut entries = Vec::with_capacity(n);
            for _ in 0..n {
                let key = EmbeddingKey(r.u64()?);
                let vector = EmbeddingVector::from_vec(r.vector()?);
                let clock = ClockValue(r.u64()?);
                entries.push((key, vector, clock));
            }
            if ty == msg_type::FETCH_RESP {
                Message::FetchResp { entries }
            } else {
                Message::SyncResp { entries }
            }
        }
        msg_type::EVICT_REQ | msg_type::SYNC_REQ | msg_type::FLUSH_REQ => {
            let n = r.u32()? as usize;
            let mut records = Vec::with_capacity(n);
            for _ in 0..n {
                let key = EmbeddingKey(r.u64()?);
                let delta = UpdateDelta::from_vec(r.vector()?);
                let c_c = ClockValue(r.u64()?);
                records.push(EvictRecord { key, delta, c_c });
            }
            match ty {
                msg_type::EVICT_REQ => Message::EvictReq { records },
                msg_type::SYNC_REQ => Message::SyncReq { records },
                _ => Message::FlushReq { records },
            }
        }
        msg_type::EVICT_ACK => Message::EvictAck,
        msg_type::FLUSH_ACK => Message::FlushAck,
        msg_type::CLOCK_CHECK_REQ | msg_type::CLOCK_CHECK_RESP => {
            let n = r.u32()? as usize;
            let mut pairs = Vec::with_capacity(n);
            for _ in 0..n {
                pairs.push((EmbeddingKey(r.u64()?), ClockValue(r.u64()?)));
            }
            if ty == msg_type::CLOCK_CHECK_REQ {
                Message::ClockCheckReq { pairs }
            } else {
                Message::ClockCheckResp { pairs }
            }
        }
        msg_type::DENSE_REDUCE_REQ => {
            let worker_id = r.u32()?;
            let grads = r.vector()?;
            Message::DenseReduceReq { worker_id, grads }
        }
        msg_type::DENSE_REDUCE_RESP => Message::DenseReduceResp { grads: r.vector()? },
        other => return Err(Error::UnknownMessageType(other)),
    };
    if !r.done() {
        return Err(Error::Frame(format!(
            "declared length mismatch: {} trailing bytes after {}",
            body.len() - r.pos,
            msg.kind_name()
        )));
    }
    Ok(msg)
}

/// Wire bytes in one direction, split by payload category. The sum of the
/// three categories equals the total bytes on the wire.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct DirectionBytes {
    pub embedding_payload_bytes: u64,
    pub clock_payload_bytes: u64,
    pub framing_bytes: u64,
}

impl DirectionBytes {
    pub fn total(&self) -> u64 {
        self.embedding_payload_bytes + self.clock_payload_bytes + self.framing_bytes
    }

    fn add(&mut self, msg: &Message, wire_len: u64) {
        let (emb, clock) = msg.payload_profile();
        self.embedding_payload_bytes += emb;
        self.clock_payload_bytes += clock;
        self.framing_bytes += wire_len - emb - clock;
    }
}

/// Per-endpoint byte and round accounting.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ByteCounter {
    pub sent: DirectionBytes,
    pub received: DirectionBytes,
    /// Number of request messages issued (network rounds).
    pub requests: u64,
}

impl ByteCounter {
    pub fn record_sent(&mut self, msg: &Message, wire_len: u64) {
        self.sent.add(msg, wire_len);
        self.requests += 1;
    }

    pub fn record_received(&mut self, msg: &Message, wire_len: u64) {
        self.received.add(msg, wire_len);
    }
}

/// A client's connection to the server. Requests are answered FIFO;
/// `send`/`recv` are split so the dense-reduction barrier can pipeline one
/// request per worker before collecting any response.
pub trait Endpoint {
    fn send(&mut self, msg: &Message) -> Result<()>;
    fn recv(&mut self) -> Result<Message>;
    fn request(&mut self, msg: &Message) -> Result<Message> {
        self.send(msg)?;
        self.recv()
    }
    fn counters(&self) -> ByteCounter;
}

//! Framed binary protocol between coordinator and workers.
//!
//! Frame header (10 bytes):
//!
//! | bytes | field                          |
//! |-------|--------------------------------|
//! | 0..4  | magic `PDIS`                   |
//! | 4     | protocol version (1)           |
//! | 5     | message type                   |
//! | 6..10 | payload length, u32 LE         |
//!
//! Payloads: strings are u32 LE length + UTF-8 bytes; tensors are u8 rank,
//! rank x u32 LE dims, then f32 LE values in row-major order.
//!
//! | type | name                | payload                      |
//! |------|---------------------|------------------------------|
//! | 1    | HELLO               | string (peer description)    |
//! | 2    | LOAD_CHECKPOINT_REF | string (weights hash)        |
//! | 3    | SET_SUBMODEL        | string (switch), u32 position|
//! | 4    | INFER_REQUEST       | tensor `[B, C, H, W]`        |
//! | 5    | PARTIAL_LOGITS      | tensor `[B, classes]`        |
//! | 6    | ERROR               | string code, string message  |
//! | 7    | PING                | empty                        |

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PDIS";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 10;
pub const MAX_PAYLOAD: usize = 256 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MsgType {
    Hello = 1,
    LoadCheckpointRef = 2,
    SetSubmodel = 3,
    InferRequest = 4,
    PartialLogits = 5,
    Error = 6,
    Ping = 7,
}

impl MsgType {
    pub fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            1 => MsgType::Hello,
            2 => MsgType::LoadCheckpointRef,
            3 => MsgType::SetSubmodel,
            4 => MsgType::InferRequest,
            5 => MsgType::PartialLogits,
            6 => MsgType::Error,
            7 => MsgType::Ping,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            MsgType::Hello => "HELLO",
            MsgType::LoadCheckpointRef => "LOAD_CHECKPOINT_REF",
            MsgType::SetSubmodel => "SET_SUBMODEL",
            MsgType::InferRequest => "INFER_REQUEST",
            MsgType::PartialLogits => "PARTIAL_LOGITS",
            MsgType::Error => "ERROR",
            MsgType::Ping => "PING",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Message {
    Hello(String),
    LoadCheckpointRef(String),
    SetSubmodel { switch: String, position: u32 },
    InferRequest(Tensor<f32>),
    PartialLogits(Tensor<f32>),
    Error { code: String, message: String },
    Ping,
}

impl Message {
    pub fn kind(&self) -> MsgType {
        match self {
            Message::Hello(_) => MsgType::Hello,
            Message::LoadCheckpointRef(_) => MsgType::LoadCheckpointRef,
            Message::SetSubmodel { .. } => MsgType::SetSubmodel,
            Message::InferRequest(_) => MsgType::InferRequest,
            Message::PartialLogits(_) => MsgType::PartialLogits,
            Message::Error { .. } => MsgType::Error,
            Message::Ping => MsgType::Ping,
        }
    }

    pub fn error(code: &str, message: impl Into<String>) -> Self {
        Message::Error {
            code: code.into(),
            message: message.into(),
        }
    }
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

fn put_tensor(buf: &mut Vec<u8>, t: &Tensor<f32>) {
    buf.push(t.rank() as u8);
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Wire(format!("payload truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Wire("invalid utf-8".into()))
    }

    fn tensor(&mut self) -> Result<Tensor<f32>> {
        let rank = self.take(1)?[0] as usize;
        let dims = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|n| n.checked_mul(4).is_some_and(|b| b <= self.buf.len()))
            .ok_or_else(|| Error::Wire(format!("tensor dims {dims:?} exceed payload")))?;
        let raw = self.take(n * 4)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Tensor::new(dims, data)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Wire(format!("{} trailing payload bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

pub fn encode_payload(msg: &Message) -> Vec<u8> {
    let mut p = Vec::new();
    match msg {
        Message::Hello(s) | Message::LoadCheckpointRef(s) => put_str(&mut p, s),
        Message::SetSubmodel { switch, position } => {
            put_str(&mut p, switch);
            p.extend_from_slice(&position.to_le_bytes());
        }
        Message::InferRequest(t) | Message::PartialLogits(t) => put_tensor(&mut p, t),
        Message::Error { code, message } => {
            put_str(&mut p, code);
            put_str(&mut p, message);
        }
        Message::Ping => {}
    }
    p
}

pub fn encode(msg: &Message) -> Vec<u8> {
    encode_with_version(msg, VERSION)
}

pub fn encode_with_version(msg: &Message, version: u8) -> Vec<u8> {
    let payload = encode_payload(msg);
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(MAGIC);
    out.push(version);
    out.push(msg.kind() as u8);
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&payload);
    out
}

pub fn decode_payload(kind: MsgType, payload: &[u8]) -> Result<Message> {
    let mut c = Cursor { buf: payload, pos: 0 };
    let msg = match kind {
        MsgType::Hello => Message::Hello(c.string()?),
        MsgType::LoadCheckpointRef => Message::LoadCheckpointRef(c.string()?),
        MsgType::SetSubmodel => Message::SetSubmodel {
            switch: c.string()?,
            position: c.u32()?,
        },
        MsgType::InferRequest => Message::InferRequest(c.tensor()?),
        MsgType::PartialLogits => Message::PartialLogits(c.tensor()?),
        MsgType::Error => Message::Error {
            code: c.string()?,
            message: c.string()?,
        },
        MsgType::Ping => Message::Ping,
    };
    c.finish()?;
    Ok(msg)
}

/// A frame as read off the wire, before version policy is applied.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub version: u8,
    pub message: Message,
    /// Header plus payload.
    pub bytes: usize,
}

/// Reads one frame. `Ok(None)` on a clean end of stream before any header byte.
pub fn read_frame(r: &mut impl Read) -> Result<Option<Frame>> {
    let mut header = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match r.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(Error::Wire("connection closed inside a frame header".into())),
            Ok(n) => got += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    if &header[0..4] != MAGIC {
        return Err(Error::Wire(format!("bad magic {:?}", &header[0..4])));
    }
    let version = header[4];
    let kind = MsgType::from_u8(header[5]).ok_or_else(|| Error::Wire(format!("unknown message type {}", header[5])))?;
    let len = u32::from_le_bytes(header[6..10].try_into().unwrap()) as usize;
    if len > MAX_PAYLOAD {
        return Err(Error::Wire(format!("payload of {len} bytes exceeds limit")));
    }
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload)?;
    Ok(Some(Frame {
        version,
        message: decode_payload(kind, &payload)?,
        bytes: HEADER_LEN + len,
    }))
}

/// Writes one frame and returns the number of bytes sent.
pub fn write_message(w: &mut impl Write, msg: &Message) -> Result<usize> {
    let bytes = encode(msg);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(bytes.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roundtrip(msg: Message) {
        let bytes = encode(&msg);
        let frame = read_frame(&mut bytes.as_slice()).unwrap().unwrap();
        assert_eq!(frame.message, msg);
        assert_eq!(frame.bytes, bytes.len());
        assert_eq!(frame.version, VERSION);
    }

    #[test]
    fn every_message_roundtrips() {
        roundtrip(Message::Hello("worker".into()));
        roundtrip(Message::LoadCheckpointRef("abc".into()));
        roundtrip(Message::SetSubmodel {
            switch: "[0.5,0.5]x".into(),
            position: 1,
        });
        roundtrip(Message::InferRequest(Tensor::new([1, 2, 1, 1], vec![1.5, -2.0]).unwrap()));
        roundtrip(Message::PartialLogits(Tensor::new([1, 3], vec![0.1, 0.2, 0.3]).unwrap()));
        roundtrip(Message::error("no-submodel", "nothing set"));
        roundtrip(Message::Ping);
    }

    #[test]
    fn exact_framing() {
        let bytes = encode(&Message::PartialLogits(Tensor::new([1, 1], vec![1.0]).unwrap()));
        assert_eq!(
            bytes,
            [b'P', b'D', b'I', b'S', 1, 5, 13, 0, 0, 0, 2, 1, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0x80, 0x3f]
        );
        assert_eq!(encode(&Message::Ping), [b'P', b'D', b'I', b'S', 1, 7, 0, 0, 0, 0]);
    }

    #[test]
    fn malformed_frames_are_rejected() {
        let mut bytes = encode(&Message::Ping);
        bytes[0] = b'X';
        assert!(read_frame(&mut bytes.as_slice()).is_err());
        let mut bytes = encode(&Message::Ping);
        bytes[5] = 99;
        assert!(read_frame(&mut bytes.as_slice()).is_err());
        let bytes = encode(&Message::Hello("abc".into()));
        assert!(read_frame(&mut &bytes[..bytes.len() - 1]).is_err());
        let mut bytes = encode(&Message::InferRequest(Tensor::new([2], vec![1.0, 2.0]).unwrap()));
        bytes[11] = 200;
        assert!(read_frame(&mut bytes.as_slice()).is_err());
        assert!(read_frame(&mut [].as_slice()).unwrap().is_none());
    }
}

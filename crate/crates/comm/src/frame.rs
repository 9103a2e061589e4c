//! Wire framing.
//!
//! ```text
//! "APFL" | version u8 | msg_type u8 | token_len u16 BE | token | payload_len u32 BE | payload
//! ```

use std::io::{self, Read, Write};

use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"APFL";
pub const VERSION: u8 = 1;
pub const DEFAULT_MAX_PAYLOAD: usize = 64 * 1024 * 1024;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FrameError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported protocol version {0}")]
    UnsupportedVersion(u8),
    #[error("length mismatch: {what} declares {declared} bytes, {available} available")]
    LengthMismatch { what: &'static str, declared: usize, available: usize },
    #[error("payload of {len} bytes exceeds limit of {max}")]
    OversizedPayload { len: usize, max: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MessageType {
    ConfigRequest = 1,
    ConfigReply = 2,
    ModelRequest = 3,
    ModelReply = 4,
    UpdateSubmit = 5,
    UpdateReply = 6,
    CustomTask = 7,
    ErrorReply = 8,
}

impl MessageType {
    pub fn from_u8(v: u8) -> Option<Self> {
        use MessageType::*;
        Some(match v {
            1 => ConfigRequest,
            2 => ConfigReply,
            3 => ModelRequest,
            4 => ModelReply,
            5 => UpdateSubmit,
            6 => UpdateReply,
            7 => CustomTask,
            8 => ErrorReply,
            _ => return None,
        })
    }
}

/// A decoded frame. `msg_type` stays raw so unknown types can be answered
/// with an error instead of failing the decode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: u8,
    pub token: Vec<u8>,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(msg_type: MessageType, token: &[u8], payload: Vec<u8>) -> Self {
        Self { msg_type: msg_type as u8, token: token.to_vec(), payload }
    }

    pub fn kind(&self) -> Option<MessageType> {
        MessageType::from_u8(self.msg_type)
    }

    pub fn encoded_len(&self) -> usize {
        12 + self.token.len() + self.payload.len()
    }
}

fn check_sizes(f: &Frame, max_payload: usize) -> Result<(), FrameError> {
    if f.token.len() > u16::MAX as usize {
        return Err(FrameError::LengthMismatch {
            what: "token",
            declared: f.token.len(),
            available: u16::MAX as usize,
        });
    }
    if f.payload.len() > max_payload.min(u32::MAX as usize) {
        return Err(FrameError::OversizedPayload { len: f.payload.len(), max: max_payload });
    }
    Ok(())
}

pub fn encode_frame(f: &Frame) -> Result<Vec<u8>, FrameError> {
    check_sizes(f, u32::MAX as usize)?;
    let mut out = Vec::with_capacity(f.encoded_len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(f.msg_type);
    out.extend_from_slice(&(f.token.len() as u16).to_be_bytes());
    out.extend_from_slice(&f.token);
    out.extend_from_slice(&(f.payload.len() as u32).to_be_bytes());
    out.extend_from_slice(&f.payload);
    Ok(out)
}

fn check_prefix(head: &[u8; 8]) -> Result<(u8, usize), FrameError> {
    let magic: [u8; 4] = head[..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(FrameError::BadMagic(magic));
    }
    if head[4] != VERSION {
        return Err(FrameError::UnsupportedVersion(head[4]));
    }
    Ok((head[5], u16::from_be_bytes([head[6], head[7]]) as usize))
}

/// Decodes exactly one frame occupying all of `bytes`.
pub fn decode_frame(bytes: &[u8], max_payload: usize) -> Result<Frame, FrameError> {
    let short = |what, declared, available| FrameError::LengthMismatch { what, declared, available };
    if bytes.len() < 4 {
        return Err(short("header", 12, bytes.len()));
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(FrameError::BadMagic(magic));
    }
    if bytes.len() < 8 {
        return Err(short("header", 12, bytes.len()));
    }
    let (msg_type, token_len) = check_prefix(bytes[..8].try_into().expect("8 bytes"))?;
    let rest = &bytes[8..];
    if rest.len() < token_len + 4 {
        return Err(short("token", token_len, rest.len().saturating_sub(4)));
    }
    let token = rest[..token_len].to_vec();
    let rest = &rest[token_len..];
    let payload_len = u32::from_be_bytes(rest[..4].try_into().expect("4 bytes")) as usize;
    if payload_len > max_payload {
        return Err(FrameError::OversizedPayload { len: payload_len, max: max_payload });
    }
    let rest = &rest[4..];
    if rest.len() != payload_len {
        return Err(short("payload", payload_len, rest.len()));
    }
    Ok(Frame { msg_type, token, payload: rest.to_vec() })
}

#[derive(Debug, Error)]
pub enum ReadError {
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("connection closed")]
    Closed,
}

/// Reads one frame from a stream. The payload length is checked against
/// `max_payload` before anything is allocated.
pub fn read_frame<R: Read>(r: &mut R, max_payload: usize) -> Result<Frame, ReadError> {
    let mut head = [0u8; 8];
    let mut got = 0;
    while got < head.len() {
        match r.read(&mut head[got..])? {
            0 if got == 0 => return Err(ReadError::Closed),
            0 => return Err(FrameError::LengthMismatch { what: "header", declared: 12, available: got }.into()),
            n => got += n,
        }
    }
    let (msg_type, token_len) = check_prefix(&head)?;
    let truncated =
        |what, declared| move |_| ReadError::Frame(FrameError::LengthMismatch { what, declared, available: 0 });
    let mut token = vec![0u8; token_len];
    r.read_exact(&mut token).map_err(truncated("token", token_len))?;
    let mut len = [0u8; 4];
    r.read_exact(&mut len).map_err(truncated("payload length", 4))?;
    let payload_len = u32::from_be_bytes(len) as usize;
    if payload_len > max_payload {
        return Err(FrameError::OversizedPayload { len: payload_len, max: max_payload }.into());
    }
    let mut payload = vec![0u8; payload_len];
    r.read_exact(&mut payload).map_err(truncated("payload", payload_len))?;
    Ok(Frame { msg_type, token, payload })
}

pub fn write_frame<W: Write>(w: &mut W, f: &Frame, max_payload: usize) -> Result<(), ReadError> {
    check_sizes(f, max_payload)?;
    w.write_all(&encode_frame(f)?)?;
    w.flush()?;
    Ok(())
}

//! Client-driven RPC for federated training: framed messages over TCP,
//! token authentication, and connectors that carry large bodies out of band.

pub mod auth;
pub mod client;
pub mod connector;
pub mod envelope;
pub mod frame;
pub mod server;

use thiserror::Error;

pub use auth::{Authenticator, NoAuth, StaticToken, StaticTokenAuth, TokenProvider};
pub use client::{ClientOptions, CommClient, ModelReply};
pub use connector::{ConnectorError, ConnectorRegistry, DataConnector, DataRef, FsConnector, MemoryConnector};
pub use envelope::{Envelope, EnvelopeError};
pub use frame::{decode_frame, encode_frame, Frame, FrameError, MessageType};
pub use server::{serve, ServeConfig, ServerHandle};

/// Codes carried in the first two bytes of an `ErrorReply` payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u16)]
pub enum ErrorCode {
    Malformed = 1,
    UnknownType = 2,
    Unauthenticated = 3,
    BadRequest = 4,
    Internal = 5,
    Unsupported = 6,
    Unknown = 0xFFFF,
}

impl ErrorCode {
    pub fn from_u16(v: u16) -> Self {
        match v {
            1 => Self::Malformed,
            2 => Self::UnknownType,
            3 => Self::Unauthenticated,
            4 => Self::BadRequest,
            5 => Self::Internal,
            6 => Self::Unsupported,
            _ => Self::Unknown,
        }
    }
}

#[derive(Debug, Error)]
pub enum CommError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Envelope(#[from] EnvelopeError),
    #[error("server error {code:?}: {message}")]
    Server { code: ErrorCode, message: String },
    #[error("protocol: {0}")]
    Protocol(String),
}

impl From<frame::ReadError> for CommError {
    fn from(e: frame::ReadError) -> Self {
        match e {
            frame::ReadError::Frame(f) => CommError::Frame(f),
            frame::ReadError::Io(io) => CommError::Io(io),
            frame::ReadError::Closed => CommError::Protocol("connection closed".into()),
        }
    }
}

//! Framed request/response protocol over TCP.
//!
//! Each connection opens with a 6-byte preamble (`"DFS1"` + version u16) in
//! both directions, then carries [`frame`]s in either order; responses are
//! matched to requests by correlation id.

pub mod conn;
pub mod frame;
pub mod message;
pub mod server;

use thiserror::Error;

pub use conn::{ConnectOptions, Connection, Endpoint};
pub use frame::{decode_frame, encode_frame, FrameHeader, HEADER_LEN, MAX_BODY};
pub use message::*;
pub use server::{Handler, Server};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("truncated frame")]
    Truncated,
    #[error("unknown message type {0:#06x}")]
    UnknownType(u16),
    #[error("compressed body failed its integrity check")]
    ChecksumMismatch,
    #[error("body of {0} bytes exceeds the frame limit")]
    BodyTooLarge(usize),
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("bad connection preamble")]
    BadPreamble,
    #[error("request timed out")]
    Timeout,
    #[error("connection lost: {0}")]
    ConnectionLost(String),
    #[error("remote error {code}: {detail}")]
    RemoteError { code: u16, detail: String },
}

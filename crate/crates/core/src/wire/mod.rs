//! Binary wire protocol and its TCP transports.

mod codec;
mod transport;

pub use codec::{
    decode, decode_payload, encode, read_message, write_message, Message, RejectReason, MAX_FRAME_LEN,
    PROTOCOL_VERSION, TYPE_HELLO, TYPE_LOGIN_ACCEPT, TYPE_LOGIN_REJECT, TYPE_LOGIN_REQUEST,
    TYPE_REGISTER_REQUEST, TYPE_REGISTER_RESPONSE,
};
pub use transport::{run_server, Client, LoginReply, ServiceHandle};

use thiserror::Error;

use crate::card::CardFormatError;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("unknown message type 0x{0:02x}")]
    UnknownType(u8),
    #[error("payload length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("frame of {0} bytes exceeds the maximum")]
    Oversize(u64),
    #[error("incomplete frame")]
    Truncated,
    #[error("invalid reject reason 0x{0:02x}")]
    InvalidReason(u8),
    #[error("field of {0} bytes does not fit a u16 length prefix")]
    FieldTooLong(usize),
    #[error("bad card image in frame: {0}")]
    CardImage(CardFormatError),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("connection closed by peer")]
    Closed,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl WireError {
    /// Transport failures as opposed to a misbehaving peer.
    pub fn is_io(&self) -> bool {
        matches!(self, WireError::Io(_))
    }
}

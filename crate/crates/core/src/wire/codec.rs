//! Frame layout: `length: u32 BE | type: u8 | payload`, where `length`
//! counts the type byte and the payload and never exceeds [`MAX_FRAME_LEN`].

use std::io::{self, Read, Write};

use crate::card::{self, CardFormatError};
use crate::primitives::{Block, Timestamp, BLOCK_LEN};
use crate::protocol::{CardImage, LoginRequest, ServerProof, Verdict};
use crate::server::LoginOutcome;

use super::WireError;

pub const MAX_FRAME_LEN: u32 = 65_536;
pub const PROTOCOL_VERSION: u8 = 0x01;

pub const TYPE_HELLO: u8 = 0x00;
pub const TYPE_LOGIN_REQUEST: u8 = 0x01;
pub const TYPE_LOGIN_ACCEPT: u8 = 0x02;
pub const TYPE_LOGIN_REJECT: u8 = 0x03;
pub const TYPE_REGISTER_REQUEST: u8 = 0x10;
pub const TYPE_REGISTER_RESPONSE: u8 = 0x11;

const LOGIN_REQUEST_LEN: usize = 2 * BLOCK_LEN + 8;
const LOGIN_ACCEPT_LEN: usize = BLOCK_LEN + 8;

/// The only distinction a rejected client learns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RejectReason {
    StaleOrInvalid,
    Replay,
}

impl RejectReason {
    pub const fn code(self) -> u8 {
        match self {
            RejectReason::StaleOrInvalid => 0x01,
            RejectReason::Replay => 0x02,
        }
    }

    pub fn from_code(code: u8) -> Result<Self, WireError> {
        match code {
            0x01 => Ok(RejectReason::StaleOrInvalid),
            0x02 => Ok(RejectReason::Replay),
            other => Err(WireError::InvalidReason(other)),
        }
    }

    pub fn for_verdict(verdict: Verdict) -> Option<Self> {
        match verdict {
            Verdict::Accept => None,
            Verdict::RejectReplay => Some(RejectReason::Replay),
            Verdict::RejectStale | Verdict::RejectFuture | Verdict::RejectProof => {
                Some(RejectReason::StaleOrInvalid)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Message {
    Hello { version: u8, algorithm_id: u8 },
    LoginRequest(LoginRequest),
    LoginAccept(ServerProof),
    LoginReject(RejectReason),
    RegisterRequest { id: Vec<u8>, pw: Vec<u8> },
    RegisterResponse(CardImage),
}

impl Message {
    pub fn msg_type(&self) -> u8 {
        match self {
            Message::Hello { .. } => TYPE_HELLO,
            Message::LoginRequest(_) => TYPE_LOGIN_REQUEST,
            Message::LoginAccept(_) => TYPE_LOGIN_ACCEPT,
            Message::LoginReject(_) => TYPE_LOGIN_REJECT,
            Message::RegisterRequest { .. } => TYPE_REGISTER_REQUEST,
            Message::RegisterResponse(_) => TYPE_REGISTER_RESPONSE,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Message::Hello { .. } => "HELLO",
            Message::LoginRequest(_) => "LOGIN_REQUEST",
            Message::LoginAccept(_) => "LOGIN_ACCEPT",
            Message::LoginReject(_) => "LOGIN_REJECT",
            Message::RegisterRequest { .. } => "REGISTER_REQUEST",
            Message::RegisterResponse(_) => "REGISTER_RESPONSE",
        }
    }

    /// The response a server sends for a login outcome.
    pub fn for_outcome(outcome: &LoginOutcome) -> Message {
        match (RejectReason::for_verdict(outcome.verdict), outcome.proof) {
            (None, Some(proof)) => Message::LoginAccept(proof),
            (Some(reason), _) => Message::LoginReject(reason),
            (None, None) => Message::LoginReject(RejectReason::StaleOrInvalid),
        }
    }
}

fn payload(msg: &Message) -> Result<Vec<u8>, WireError> {
    let mut out = Vec::new();
    match msg {
        Message::Hello {
            version,
            algorithm_id,
        } => out.extend_from_slice(&[*version, *algorithm_id]),
        Message::LoginRequest(req) => {
            out.extend_from_slice(req.did.as_bytes());
            out.extend_from_slice(req.proof.as_bytes());
            out.extend_from_slice(&req.t_u.millis().to_be_bytes());
        }
        Message::LoginAccept(proof) => {
            out.extend_from_slice(proof.x_proof.as_bytes());
            out.extend_from_slice(&proof.t_s_star.millis().to_be_bytes());
        }
        Message::LoginReject(reason) => out.push(reason.code()),
        Message::RegisterRequest { id, pw } => {
            for field in [id, pw] {
                let len = u16::try_from(field.len()).map_err(|_| WireError::FieldTooLong(field.len()))?;
                out.extend_from_slice(&len.to_be_bytes());
                out.extend_from_slice(field);
            }
        }
        Message::RegisterResponse(image) => out = card::save_image(image)?,
    }
    Ok(out)
}

pub fn encode(msg: &Message) -> Result<Vec<u8>, WireError> {
    let body = payload(msg)?;
    let len = body.len() as u64 + 1;
    if len > MAX_FRAME_LEN as u64 {
        return Err(WireError::Oversize(len));
    }
    let mut out = Vec::with_capacity(4 + len as usize);
    out.extend_from_slice(&(len as u32).to_be_bytes());
    out.push(msg.msg_type());
    out.extend_from_slice(&body);
    Ok(out)
}

fn exact(payload: &[u8], expected: usize) -> Result<(), WireError> {
    if payload.len() != expected {
        return Err(WireError::LengthMismatch {
            expected,
            actual: payload.len(),
        });
    }
    Ok(())
}

fn block_at(payload: &[u8], offset: usize) -> Block {
    Block::from_slice(&payload[offset..offset + BLOCK_LEN]).expect("length checked")
}

fn timestamp_at(payload: &[u8], offset: usize) -> Timestamp {
    let mut raw = [0u8; 8];
    raw.copy_from_slice(&payload[offset..offset + 8]);
    Timestamp(u64::from_be_bytes(raw))
}

fn length_prefixed<'a>(payload: &mut &'a [u8]) -> Result<&'a [u8], WireError> {
    if payload.len() < 2 {
        return Err(WireError::Truncated);
    }
    let len = u16::from_be_bytes([payload[0], payload[1]]) as usize;
    if payload.len() < 2 + len {
        return Err(WireError::Truncated);
    }
    let field = &payload[2..2 + len];
    *payload = &payload[2 + len..];
    Ok(field)
}

pub fn decode_payload(msg_type: u8, payload: &[u8]) -> Result<Message, WireError> {
    match msg_type {
        TYPE_HELLO => {
            exact(payload, 2)?;
            Ok(Message::Hello {
                version: payload[0],
                algorithm_id: payload[1],
            })
        }
        TYPE_LOGIN_REQUEST => {
            exact(payload, LOGIN_REQUEST_LEN)?;
            Ok(Message::LoginRequest(LoginRequest {
                did: block_at(payload, 0),
                proof: block_at(payload, BLOCK_LEN),
                t_u: timestamp_at(payload, 2 * BLOCK_LEN),
            }))
        }
        TYPE_LOGIN_ACCEPT => {
            exact(payload, LOGIN_ACCEPT_LEN)?;
            Ok(Message::LoginAccept(ServerProof {
                x_proof: block_at(payload, 0),
                t_s_star: timestamp_at(payload, BLOCK_LEN),
            }))
        }
        TYPE_LOGIN_REJECT => {
            exact(payload, 1)?;
            Ok(Message::LoginReject(RejectReason::from_code(payload[0])?))
        }
        TYPE_REGISTER_REQUEST => {
            let mut rest = payload;
            let id = length_prefixed(&mut rest)?.to_vec();
            let pw = length_prefixed(&mut rest)?.to_vec();
            if !rest.is_empty() {
                return Err(WireError::LengthMismatch {
                    expected: payload.len() - rest.len(),
                    actual: payload.len(),
                });
            }
            Ok(Message::RegisterRequest { id, pw })
        }
        TYPE_REGISTER_RESPONSE => Ok(Message::RegisterResponse(card::load_image(payload)?)),
        other => Err(WireError::UnknownType(other)),
    }
}

/// Validates a declared frame length.
fn check_declared(len: u32) -> Result<usize, WireError> {
    if len == 0 {
        return Err(WireError::LengthMismatch {
            expected: 1,
            actual: 0,
        });
    }
    if len > MAX_FRAME_LEN {
        return Err(WireError::Oversize(len as u64));
    }
    Ok(len as usize)
}

/// Decodes exactly one complete frame.
pub fn decode(bytes: &[u8]) -> Result<Message, WireError> {
    if bytes.len() < 4 {
        return Err(WireError::Truncated);
    }
    let len = check_declared(u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]))?;
    let body = &bytes[4..];
    if body.len() < len {
        return Err(WireError::Truncated);
    }
    if body.len() > len {
        return Err(WireError::LengthMismatch {
            expected: len,
            actual: body.len(),
        });
    }
    decode_payload(body[0], &body[1..])
}

/// Reads one frame; `Ok(None)` on a clean end of stream between frames.
pub fn read_message<R: Read>(reader: &mut R) -> Result<Option<Message>, WireError> {
    let mut header = [0u8; 4];
    let mut filled = 0;
    while filled < header.len() {
        match reader.read(&mut header[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => return Err(WireError::Truncated),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = check_declared(u32::from_be_bytes(header))?;
    let mut body = vec![0u8; len];
    reader.read_exact(&mut body).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => WireError::Truncated,
        _ => WireError::Io(e),
    })?;
    decode_payload(body[0], &body[1..]).map(Some)
}

pub fn write_message<W: Write>(writer: &mut W, msg: &Message) -> Result<(), WireError> {
    writer.write_all(&encode(msg)?)?;
    writer.flush()?;
    Ok(())
}

impl From<CardFormatError> for WireError {
    fn from(e: CardFormatError) -> Self {
        WireError::CardImage(e)
    }
}

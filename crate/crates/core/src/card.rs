//! Smart-card emulator.
//!
//! A [`CardSession`] wraps a [`CardImage`] and refuses every protocol
//! operation until the holder has presented the matching identity and
//! password. After [`DEFAULT_MAX_FAILURES`] consecutive bad attempts the
//! session is locked out until the image is reloaded.
//!
//! Card images persist as `.card` files:
//!
//! ```text
//! "MLSC" | version 0x01 | algorithm id | id len (u16 BE) | id | nonce[32] | H(PW)[32] | y[32]
//! ```

use thiserror::Error;
use zeroize::Zeroizing;

use crate::clock::Clock;
use crate::primitives::{Block, HashAlgorithm, Timestamp, BLOCK_LEN};
use crate::protocol::{self, CardImage, LoginRequest, ProtocolError, ServerProof};

pub const CARD_MAGIC: &[u8; 4] = b"MLSC";
pub const CARD_VERSION: u8 = 0x01;
pub const CARD_FILE_EXTENSION: &str = "card";
pub const DEFAULT_MAX_FAILURES: u32 = 3;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CardFormatError {
    #[error("not a card image (bad magic)")]
    BadMagic,
    #[error("unsupported card image version {0}")]
    UnsupportedVersion(u8),
    #[error("unsupported hash algorithm id 0x{0:02x}")]
    UnsupportedAlgorithm(u8),
    #[error("card image truncated")]
    Truncated,
    #[error("{0} unexpected bytes after card image")]
    TrailingBytes(usize),
    #[error("identity of {0} bytes does not fit the card format")]
    IdTooLong(usize),
}

pub fn save_image(image: &CardImage) -> Result<Vec<u8>, CardFormatError> {
    let id_len = u16::try_from(image.id.len()).map_err(|_| CardFormatError::IdTooLong(image.id.len()))?;
    let mut out = Vec::with_capacity(8 + image.id.len() + 3 * BLOCK_LEN);
    out.extend_from_slice(CARD_MAGIC);
    out.push(CARD_VERSION);
    out.push(image.algorithm.id());
    out.extend_from_slice(&id_len.to_be_bytes());
    out.extend_from_slice(&image.id);
    out.extend_from_slice(image.nonce.as_bytes());
    out.extend_from_slice(image.pw_digest.as_bytes());
    out.extend_from_slice(image.server_secondary.as_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CardFormatError> {
        if self.buf.len() < n {
            return Err(CardFormatError::Truncated);
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn block(&mut self) -> Result<Block, CardFormatError> {
        self.take(BLOCK_LEN)
            .map(|b| Block::from_slice(b).expect("length checked"))
    }
}

pub fn load_image(bytes: &[u8]) -> Result<CardImage, CardFormatError> {
    let mut r = Reader { buf: bytes };
    if r.take(4)? != CARD_MAGIC {
        return Err(CardFormatError::BadMagic);
    }
    let version = r.take(1)?[0];
    if version != CARD_VERSION {
        return Err(CardFormatError::UnsupportedVersion(version));
    }
    let alg_id = r.take(1)?[0];
    let algorithm =
        HashAlgorithm::from_id(alg_id).map_err(|_| CardFormatError::UnsupportedAlgorithm(alg_id))?;
    let id_len = u16::from_be_bytes([r.take(1)?[0], r.take(1)?[0]]) as usize;
    let id = r.take(id_len)?.to_vec();
    let nonce = r.block()?;
    let pw_digest = r.block()?;
    let server_secondary = r.block()?;
    if !r.buf.is_empty() {
        return Err(CardFormatError::TrailingBytes(r.buf.len()));
    }
    Ok(CardImage {
        id,
        nonce,
        pw_digest,
        server_secondary,
        algorithm,
    })
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CardError {
    #[error("card is locked; unlock with identity and password first")]
    Locked,
    #[error("card is locked out after too many failed attempts")]
    LockedOut,
    #[error("no login handshake in flight")]
    NoHandshake,
    #[error("new password must not be empty")]
    EmptyPassword,
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

enum Access {
    Locked { failures: u32 },
    Unlocked { pw: Zeroizing<Vec<u8>> },
    LockedOut,
}

/// The observable lock state of a session.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LockState {
    Locked,
    Unlocked,
    LockedOut,
}

pub struct CardSession {
    image: CardImage,
    access: Access,
    max_failures: u32,
    active_t_u: Option<Timestamp>,
    delta_t: u64,
}

impl CardSession {
    /// `delta_t` is the window the card applies to the server's answer.
    pub fn new(image: CardImage, delta_t: u64) -> Self {
        Self::with_max_failures(image, delta_t, DEFAULT_MAX_FAILURES)
    }

    pub fn with_max_failures(image: CardImage, delta_t: u64, max_failures: u32) -> Self {
        CardSession {
            image,
            access: Access::Locked { failures: 0 },
            max_failures: max_failures.max(1),
            active_t_u: None,
            delta_t,
        }
    }

    pub fn image(&self) -> &CardImage {
        &self.image
    }

    pub fn lock_state(&self) -> LockState {
        match self.access {
            Access::Locked { .. } => LockState::Locked,
            Access::Unlocked { .. } => LockState::Unlocked,
            Access::LockedOut => LockState::LockedOut,
        }
    }

    pub fn failures(&self) -> u32 {
        match self.access {
            Access::Locked { failures } => failures,
            Access::Unlocked { .. } => 0,
            Access::LockedOut => self.max_failures,
        }
    }

    pub fn active_t_u(&self) -> Option<Timestamp> {
        self.active_t_u
    }

    /// Validates `(id, pw)` against the card. On success the password is
    /// held in volatile memory until the session relocks.
    pub fn unlock(&mut self, id: &[u8], pw: &[u8]) -> bool {
        let failures = match self.access {
            Access::LockedOut => return false,
            Access::Locked { failures } => failures,
            Access::Unlocked { .. } => 0,
        };
        if protocol::credentials_match(&self.image, pw, id) {
            self.access = Access::Unlocked {
                pw: Zeroizing::new(pw.to_vec()),
            };
            true
        } else {
            let failures = failures + 1;
            self.active_t_u = None;
            self.access = if failures >= self.max_failures {
                Access::LockedOut
            } else {
                Access::Locked { failures }
            };
            false
        }
    }

    /// Drops the retained password and any handshake in flight.
    pub fn lock(&mut self) {
        if let Access::Unlocked { .. } = self.access {
            self.access = Access::Locked { failures: 0 };
        }
        self.active_t_u = None;
    }

    fn password(&self) -> Result<&[u8], CardError> {
        match &self.access {
            Access::Unlocked { pw } => Ok(pw.as_slice()),
            Access::Locked { .. } => Err(CardError::Locked),
            Access::LockedOut => Err(CardError::LockedOut),
        }
    }

    pub fn start_login(&mut self, clock: &dyn Clock) -> Result<LoginRequest, CardError> {
        let pw = self.password()?;
        let t_u = clock.now();
        let req = protocol::build_login_request(&self.image, pw, &self.image.id, t_u)?;
        self.active_t_u = Some(t_u);
        Ok(req)
    }

    /// Returns whether the server proved knowledge of its primary secret.
    pub fn finish_login(&mut self, proof: &ServerProof, clock: &dyn Clock) -> Result<bool, CardError> {
        self.password()?;
        let t_u = self.active_t_u.take().ok_or(CardError::NoHandshake)?;
        Ok(protocol::verify_server_proof(
            &self.image,
            proof,
            t_u,
            clock.now(),
            self.delta_t,
        ))
    }

    /// Replaces the image per the nonce update and relocks the session.
    pub fn change_password(&mut self, new_pw: &[u8]) -> Result<(), CardError> {
        let old_pw = self.password()?;
        if new_pw.is_empty() {
            return Err(CardError::EmptyPassword);
        }
        let image = protocol::change_password_compute(&self.image, old_pw, new_pw)?;
        self.image = image;
        self.lock();
        Ok(())
    }
}

//! The scheme's equations as pure functions.
//!
//! With `H` the agreed hash, `h(a, b) = H(encode_pair(a, b))` and `T(t)` the
//! canonical block of a timestamp:
//!
//! | step                | value                                              |
//! |---------------------|----------------------------------------------------|
//! | registration nonce  | `N  = h(PW, ID) ^ H(x)`                            |
//! | dynamic id          | `DID = h(PW, ID) ^ H(y ^ T(t_u))`                  |
//! | login proof         | `C  = H(N ^ T(t_u) ^ y)`                           |
//! | server check        | `C* = H(DID ^ H(y ^ T(t_u)) ^ H(x) ^ T(t_u) ^ y)`  |
//! | server proof        | `X  = H(h(PW, ID) ^ H(x) ^ T(t_u) ^ T(t_s*))`      |
//! | card check          | `X* = H(N ^ T(t_u) ^ T(t_s*))`                     |
//! | password change     | `N' = N ^ h(PW, ID) ^ h(PW', ID)`                  |
//!
//! Nothing here keeps state; the server side needs only `(x, y)`.

use std::fmt;

use rand::{CryptoRng, RngCore};
use thiserror::Error;

use crate::primitives::{Block, HashAlgorithm, PrimitiveError, Timestamp, BLOCK_LEN};

/// Longest identity or password accepted; both travel behind u16 length prefixes.
pub const MAX_FIELD_LEN: usize = u16::MAX as usize;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("password must not be empty")]
    EmptyPassword,
    #[error("identity must not be empty")]
    EmptyId,
    #[error("field of {0} bytes exceeds the {MAX_FIELD_LEN}-byte limit")]
    FieldTooLong(usize),
    #[error("entered identity or password does not match the card")]
    CredentialMismatch,
    #[error("old password does not match the card")]
    OldPasswordMismatch,
    #[error(transparent)]
    Encoding(#[from] PrimitiveError),
}

/// Personalized card contents: `{ID, N, H(PW), y, H}`.
#[derive(Clone, PartialEq, Eq)]
pub struct CardImage {
    pub id: Vec<u8>,
    pub nonce: Block,
    pub pw_digest: Block,
    pub server_secondary: Block,
    pub algorithm: HashAlgorithm,
}

impl fmt::Debug for CardImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CardImage")
            .field("id", &String::from_utf8_lossy(&self.id))
            .field("nonce", &self.nonce)
            .field("algorithm", &self.algorithm)
            .finish_non_exhaustive()
    }
}

/// `(DID, C, t_u)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct LoginRequest {
    pub did: Block,
    pub proof: Block,
    pub t_u: Timestamp,
}

/// `(X, t_s*)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ServerProof {
    pub x_proof: Block,
    pub t_s_star: Timestamp,
}

/// The server's primary secret `x`, secondary secret `y` and the hash they are used with.
#[derive(Clone, PartialEq, Eq)]
pub struct ServerSecrets {
    pub algorithm: HashAlgorithm,
    pub x: Block,
    pub y: Block,
}

impl ServerSecrets {
    pub fn new(algorithm: HashAlgorithm, x: Block, y: Block) -> Self {
        ServerSecrets { algorithm, x, y }
    }

    /// Draws `x` and `y` as independent uniform 32-byte values.
    pub fn generate<R: RngCore + CryptoRng>(
        algorithm: HashAlgorithm,
        rng: &mut R,
    ) -> Result<Self, rand::Error> {
        let mut x = [0u8; BLOCK_LEN];
        let mut y = [0u8; BLOCK_LEN];
        rng.try_fill_bytes(&mut x)?;
        rng.try_fill_bytes(&mut y)?;
        Ok(ServerSecrets::new(algorithm, Block::new(x), Block::new(y)))
    }

    fn hashed_primary(&self) -> Block {
        self.algorithm.digest(self.x.as_bytes())
    }
}

impl fmt::Debug for ServerSecrets {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ServerSecrets")
            .field("algorithm", &self.algorithm)
            .finish_non_exhaustive()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Verdict {
    Accept,
    RejectStale,
    RejectFuture,
    RejectProof,
    RejectReplay,
}

impl Verdict {
    pub fn is_accept(self) -> bool {
        self == Verdict::Accept
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Accept => "ACCEPT",
            Verdict::RejectStale => "REJECT_STALE",
            Verdict::RejectFuture => "REJECT_FUTURE",
            Verdict::RejectProof => "REJECT_PROOF",
            Verdict::RejectReplay => "REJECT_REPLAY",
        })
    }
}

fn check_field(value: &[u8], empty: ProtocolError) -> Result<(), ProtocolError> {
    if value.is_empty() {
        return Err(empty);
    }
    if value.len() > MAX_FIELD_LEN {
        return Err(ProtocolError::FieldTooLong(value.len()));
    }
    Ok(())
}

/// Masks the secondary secret with a timestamp and hashes it: `H(y ^ T(t))`.
fn time_mask(alg: HashAlgorithm, y: Block, t: Timestamp) -> Block {
    alg.digest((y ^ t.to_block()).as_bytes())
}

pub fn register(pw: &[u8], id: &[u8], secrets: &ServerSecrets) -> Result<CardImage, ProtocolError> {
    check_field(pw, ProtocolError::EmptyPassword)?;
    check_field(id, ProtocolError::EmptyId)?;
    let alg = secrets.algorithm;
    let nonce = alg.digest_pair(pw, id)? ^ secrets.hashed_primary();
    Ok(CardImage {
        id: id.to_vec(),
        nonce,
        pw_digest: alg.digest(pw),
        server_secondary: secrets.y,
        algorithm: alg,
    })
}

/// Whether `(id, pw)` matches what the card stores.
pub fn credentials_match(card: &CardImage, pw: &[u8], id: &[u8]) -> bool {
    // Evaluate both so the comparison does not short-circuit on the id.
    let id_ok = id == card.id.as_slice();
    let pw_ok = card.algorithm.digest(pw).ct_eq(&card.pw_digest);
    id_ok & pw_ok
}

pub fn build_login_request(
    card: &CardImage,
    pw: &[u8],
    id: &[u8],
    t_u: Timestamp,
) -> Result<LoginRequest, ProtocolError> {
    if !credentials_match(card, pw, id) {
        return Err(ProtocolError::CredentialMismatch);
    }
    let alg = card.algorithm;
    let y = card.server_secondary;
    let did = alg.digest_pair(pw, id)? ^ time_mask(alg, y, t_u);
    let proof = alg.digest((card.nonce ^ t_u.to_block() ^ y).as_bytes());
    Ok(LoginRequest { did, proof, t_u })
}

/// Unmasks the dynamic id, yielding `h(PW, ID)` for an honest request.
pub fn recover_pw_digest(req: &LoginRequest, y: Block, alg: HashAlgorithm) -> Block {
    req.did ^ time_mask(alg, y, req.t_u)
}

/// Checks `t` against `now` inside a symmetric window of `delta_t` millis.
/// The boundary itself is inside the window.
fn freshness(now: Timestamp, t: Timestamp, delta_t: u64) -> Option<Verdict> {
    if now >= t {
        (now.0 - t.0 > delta_t).then_some(Verdict::RejectStale)
    } else {
        (t.0 - now.0 > delta_t).then_some(Verdict::RejectFuture)
    }
}

pub fn verify_login(secrets: &ServerSecrets, req: &LoginRequest, t_s: Timestamp, delta_t: u64) -> Verdict {
    if let Some(reject) = freshness(t_s, req.t_u, delta_t) {
        return reject;
    }
    let alg = secrets.algorithm;
    let pair_digest = recover_pw_digest(req, secrets.y, alg);
    let expected =
        alg.digest((pair_digest ^ secrets.hashed_primary() ^ req.t_u.to_block() ^ secrets.y).as_bytes());
    if expected.ct_eq(&req.proof) {
        Verdict::Accept
    } else {
        Verdict::RejectProof
    }
}

pub fn build_server_proof(
    recovered_pw_digest: Block,
    secrets: &ServerSecrets,
    t_u: Timestamp,
    t_s_star: Timestamp,
) -> ServerProof {
    let x_proof = secrets.algorithm.digest(
        (recovered_pw_digest ^ secrets.hashed_primary() ^ t_u.to_block() ^ t_s_star.to_block()).as_bytes(),
    );
    ServerProof { x_proof, t_s_star }
}

/// Card-side check of the server's answer. `t_u` is the timestamp of the
/// card's own request, `t_u_star` the card's clock when the answer arrived.
pub fn verify_server_proof(
    card: &CardImage,
    proof: &ServerProof,
    t_u: Timestamp,
    t_u_star: Timestamp,
    delta_t: u64,
) -> bool {
    if freshness(t_u_star, proof.t_s_star, delta_t).is_some() {
        return false;
    }
    let expected = card
        .algorithm
        .digest((card.nonce ^ t_u.to_block() ^ proof.t_s_star.to_block()).as_bytes());
    expected.ct_eq(&proof.x_proof)
}

pub fn change_password_compute(
    card: &CardImage,
    old_pw: &[u8],
    new_pw: &[u8],
) -> Result<CardImage, ProtocolError> {
    if !card.algorithm.digest(old_pw).ct_eq(&card.pw_digest) {
        return Err(ProtocolError::OldPasswordMismatch);
    }
    check_field(new_pw, ProtocolError::EmptyPassword)?;
    let alg = card.algorithm;
    let nonce = card.nonce ^ alg.digest_pair(old_pw, &card.id)? ^ alg.digest_pair(new_pw, &card.id)?;
    Ok(CardImage {
        nonce,
        pw_digest: alg.digest(new_pw),
        ..card.clone()
    })
}

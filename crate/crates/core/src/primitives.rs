//! Byte-level building blocks: fixed-width blocks, XOR algebra, the one-way
//! hash, timestamp canonicalization and the length-prefixed pair encoding
//! used for two-argument hashes.

use std::fmt;
use std::ops::{BitXor, BitXorAssign};

use sha2::{Digest, Sha256, Sha512_256};
use subtle::ConstantTimeEq;
use thiserror::Error;

/// Width in bytes of every digest, secret and nonce.
pub const BLOCK_LEN: usize = 32;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PrimitiveError {
    #[error("pair component of {0} bytes does not fit a 32-bit length prefix")]
    ComponentTooLong(usize),
    #[error("unknown hash algorithm id 0x{0:02x}")]
    UnknownAlgorithm(u8),
}

/// A fixed 32-byte value.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Block([u8; BLOCK_LEN]);

impl Block {
    pub const ZERO: Block = Block([0u8; BLOCK_LEN]);

    pub const fn new(bytes: [u8; BLOCK_LEN]) -> Self {
        Block(bytes)
    }

    /// A block with every byte set to `byte`.
    pub const fn splat(byte: u8) -> Self {
        Block([byte; BLOCK_LEN])
    }

    /// Returns `None` unless `bytes` is exactly 32 bytes long.
    pub fn from_slice(bytes: &[u8]) -> Option<Self> {
        <[u8; BLOCK_LEN]>::try_from(bytes).ok().map(Block)
    }

    pub const fn as_bytes(&self) -> &[u8; BLOCK_LEN] {
        &self.0
    }

    pub const fn into_bytes(self) -> [u8; BLOCK_LEN] {
        self.0
    }

    /// Constant-time equality.
    pub fn ct_eq(&self, other: &Block) -> bool {
        self.0.ct_eq(&other.0).into()
    }

    /// Returns a copy with bit `index` (0..256, MSB-first within each byte) flipped.
    pub fn with_bit_flipped(mut self, index: usize) -> Self {
        self.0[index / 8] ^= 0x80 >> (index % 8);
        self
    }

    pub fn to_hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl fmt::Debug for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Block({})", self.to_hex())
    }
}

impl AsRef<[u8]> for Block {
    fn as_ref(&self) -> &[u8] {
        &self.0
    }
}

impl From<[u8; BLOCK_LEN]> for Block {
    fn from(bytes: [u8; BLOCK_LEN]) -> Self {
        Block(bytes)
    }
}

impl BitXor for Block {
    type Output = Block;

    fn bitxor(mut self, rhs: Block) -> Block {
        self ^= rhs;
        self
    }
}

impl BitXorAssign for Block {
    fn bitxor_assign(&mut self, rhs: Block) {
        for (a, b) in self.0.iter_mut().zip(rhs.0.iter()) {
            *a ^= b;
        }
    }
}

/// Byte-wise XOR of two blocks.
pub fn xor_block(a: Block, b: Block) -> Block {
    a ^ b
}

/// Milliseconds since the Unix epoch, UTC.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Timestamp(pub u64);

impl Timestamp {
    pub const fn from_millis(millis: u64) -> Self {
        Timestamp(millis)
    }

    pub const fn millis(self) -> u64 {
        self.0
    }

    pub const fn saturating_add(self, millis: u64) -> Self {
        Timestamp(self.0.saturating_add(millis))
    }

    pub const fn saturating_sub(self, millis: u64) -> Self {
        Timestamp(self.0.saturating_sub(millis))
    }

    /// Canonical 32-byte form: big-endian millis in the final 8 bytes.
    pub fn to_block(self) -> Block {
        ts_to_block(self)
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}ms", self.0)
    }
}

pub fn ts_to_block(t: Timestamp) -> Block {
    let mut bytes = [0u8; BLOCK_LEN];
    bytes[BLOCK_LEN - 8..].copy_from_slice(&t.0.to_be_bytes());
    Block(bytes)
}

/// Identifies the one-way hash a card and server agree on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum HashAlgorithm {
    #[default]
    Sha256,
    Sha512_256,
}

impl HashAlgorithm {
    pub const fn id(self) -> u8 {
        match self {
            HashAlgorithm::Sha256 => 0x01,
            HashAlgorithm::Sha512_256 => 0x02,
        }
    }

    pub fn from_id(id: u8) -> Result<Self, PrimitiveError> {
        match id {
            0x01 => Ok(HashAlgorithm::Sha256),
            0x02 => Ok(HashAlgorithm::Sha512_256),
            other => Err(PrimitiveError::UnknownAlgorithm(other)),
        }
    }

    pub fn digest(self, data: &[u8]) -> Block {
        let out: [u8; BLOCK_LEN] = match self {
            HashAlgorithm::Sha256 => Sha256::digest(data).into(),
            HashAlgorithm::Sha512_256 => Sha512_256::digest(data).into(),
        };
        Block(out)
    }

    /// `h(a, b)`, realized as the digest of [`encode_pair`].
    pub fn digest_pair(self, first: &[u8], second: &[u8]) -> Result<Block, PrimitiveError> {
        Ok(self.digest(&encode_pair(first, second)?))
    }
}

/// SHA-256, the default algorithm.
pub fn hash(data: &[u8]) -> Block {
    HashAlgorithm::Sha256.digest(data)
}

/// `len(first) ∥ first ∥ len(second) ∥ second` with 4-byte big-endian lengths.
pub fn encode_pair(first: &[u8], second: &[u8]) -> Result<Vec<u8>, PrimitiveError> {
    let mut out = Vec::with_capacity(8 + first.len() + second.len());
    for part in [first, second] {
        let len = u32::try_from(part.len()).map_err(|_| PrimitiveError::ComponentTooLong(part.len()))?;
        out.extend_from_slice(&len.to_be_bytes());
        out.extend_from_slice(part);
    }
    Ok(out)
}

//! Smart-card based mutual authentication without a server-side verifier
//! table.
//!
//! The crate is layered bottom-up:
//!
//! - [`primitives`]: blocks, XOR, the hash and canonical encodings.
//! - [`protocol`]: the scheme's equations as pure functions.
//! - [`card`]: a password-gated card emulator and the `.card` file format.
//! - [`server`]: the stateless verifier with its optional replay cache.
//! - [`wire`]: framed binary messages and TCP transports.
//! - [`redteam`]: scripted adversaries against live or in-process servers.

pub mod card;
pub mod cli;
pub mod clock;
pub mod primitives;
pub mod protocol;
pub mod redteam;
pub mod server;
pub mod wire;

pub use card::{CardError, CardSession};
pub use clock::{Clock, ManualClock, SkewedClock, SystemClock};
pub use primitives::{Block, HashAlgorithm, Timestamp};
pub use protocol::{CardImage, LoginRequest, ServerProof, ServerSecrets, Verdict};
pub use server::{AuthServer, Mode, ServerConfig};

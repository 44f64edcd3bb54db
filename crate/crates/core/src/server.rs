//! The authentication server.
//!
//! Long-lived state is limited to the secrets, the configuration and the
//! replay cache. Registration hands the user a card and forgets them; login
//! verification needs nothing per user.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::sync::Mutex;

use rand::{CryptoRng, RngCore};
use thiserror::Error;

use crate::clock::Clock;
use crate::primitives::{Block, HashAlgorithm, Timestamp, BLOCK_LEN};
use crate::protocol::{self, CardImage, LoginRequest, ProtocolError, ServerProof, ServerSecrets, Verdict};

pub const DEFAULT_DELTA_T_MS: u64 = 60_000;

pub const SECRETS_MAGIC: &[u8; 4] = b"MLSS";
pub const SECRETS_VERSION: u8 = 0x01;
/// magic(4) | version(1) | algorithm id(1) | reserved(2) | x(32) | y(32)
pub const SECRETS_FILE_LEN: usize = 72;

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(&'static str),
    #[error("entropy source failed: {0}")]
    Entropy(#[from] rand::Error),
    #[error("malformed secrets file: {0}")]
    SecretsFormat(&'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mode {
    /// Freshness window only; an identical request inside the window is accepted again.
    Strict,
    /// Additionally rejects any `(C, t_u)` pair already accepted.
    #[default]
    Hardened,
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "strict" => Ok(Mode::Strict),
            "hardened" => Ok(Mode::Hardened),
            other => Err(format!("unknown mode `{other}` (expected strict or hardened)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ServerConfig {
    pub delta_t: u64,
    pub mode: Mode,
    pub algorithm: HashAlgorithm,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            delta_t: DEFAULT_DELTA_T_MS,
            mode: Mode::Hardened,
            algorithm: HashAlgorithm::Sha256,
        }
    }
}

impl ServerConfig {
    pub fn validate(&self) -> Result<(), ServerError> {
        if self.delta_t == 0 {
            return Err(ServerError::InvalidConfig("delta_t must be positive"));
        }
        Ok(())
    }
}

pub fn encode_secrets(secrets: &ServerSecrets) -> [u8; SECRETS_FILE_LEN] {
    let mut out = [0u8; SECRETS_FILE_LEN];
    out[..4].copy_from_slice(SECRETS_MAGIC);
    out[4] = SECRETS_VERSION;
    out[5] = secrets.algorithm.id();
    out[8..40].copy_from_slice(secrets.x.as_bytes());
    out[40..].copy_from_slice(secrets.y.as_bytes());
    out
}

pub fn decode_secrets(bytes: &[u8]) -> Result<ServerSecrets, ServerError> {
    if bytes.len() != SECRETS_FILE_LEN {
        return Err(ServerError::SecretsFormat("wrong length"));
    }
    if &bytes[..4] != SECRETS_MAGIC {
        return Err(ServerError::SecretsFormat("bad magic"));
    }
    if bytes[4] != SECRETS_VERSION {
        return Err(ServerError::SecretsFormat("unsupported version"));
    }
    let algorithm =
        HashAlgorithm::from_id(bytes[5]).map_err(|_| ServerError::SecretsFormat("unknown algorithm"))?;
    if bytes[6..8] != [0, 0] {
        return Err(ServerError::SecretsFormat("reserved bytes set"));
    }
    let x = Block::from_slice(&bytes[8..8 + BLOCK_LEN]).expect("length checked");
    let y = Block::from_slice(&bytes[8 + BLOCK_LEN..]).expect("length checked");
    Ok(ServerSecrets::new(algorithm, x, y))
}

/// Writes the secrets file readable by the owner only.
pub fn write_secrets_file(path: &Path, secrets: &ServerSecrets) -> Result<(), ServerError> {
    let mut options = fs::OpenOptions::new();
    options.write(true).create(true).truncate(true);
    #[cfg(unix)]
    {
        use std::os::unix::fs::OpenOptionsExt;
        options.mode(0o600);
    }
    let mut file = options.open(path)?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        file.set_permissions(fs::Permissions::from_mode(0o600))?;
    }
    file.write_all(&encode_secrets(secrets))?;
    file.sync_all()?;
    Ok(())
}

pub fn read_secrets_file(path: &Path) -> Result<ServerSecrets, ServerError> {
    decode_secrets(&fs::read(path)?)
}

/// Accepted `(C, t_u)` pairs, ordered by timestamp so pruning is a split.
#[derive(Debug, Default)]
pub struct ReplayCache {
    entries: Mutex<BTreeSet<(Timestamp, Block)>>,
}

impl ReplayCache {
    pub fn new() -> Self {
        Self::default()
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, BTreeSet<(Timestamp, Block)>> {
        // A poisoned set is still a valid set.
        self.entries.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Prunes entries older than `now - window`, then inserts the pair.
    /// Returns `false` if the pair was already present.
    pub fn check_and_insert(&self, proof: Block, t_u: Timestamp, now: Timestamp, window: u64) -> bool {
        let mut entries = self.lock();
        Self::prune_locked(&mut entries, now, window);
        entries.insert((t_u, proof))
    }

    pub fn prune(&self, now: Timestamp, window: u64) {
        Self::prune_locked(&mut self.lock(), now, window);
    }

    fn prune_locked(entries: &mut BTreeSet<(Timestamp, Block)>, now: Timestamp, window: u64) {
        let Some(cutoff) = now.millis().checked_sub(window) else {
            return;
        };
        // Keeps everything with t_u >= cutoff.
        *entries = entries.split_off(&(Timestamp(cutoff), Block::ZERO));
    }

    pub fn len(&self) -> usize {
        self.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.lock().is_empty()
    }

    pub fn entries(&self) -> Vec<(Timestamp, Block)> {
        self.lock().iter().copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoginOutcome {
    pub verdict: Verdict,
    pub proof: Option<ServerProof>,
}

/// Everything the server retains, for inspection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateSnapshot {
    pub secrets_file: [u8; SECRETS_FILE_LEN],
    pub config: ServerConfig,
    pub replay_entries: Vec<(Timestamp, Block)>,
}

#[derive(Debug)]
pub struct AuthServer {
    secrets: ServerSecrets,
    config: ServerConfig,
    replay: ReplayCache,
}

impl AuthServer {
    pub fn init<R: RngCore + CryptoRng>(config: ServerConfig, rng: &mut R) -> Result<Self, ServerError> {
        config.validate()?;
        let secrets = ServerSecrets::generate(config.algorithm, rng)?;
        Self::with_secrets(config, secrets)
    }

    /// Restarts from persisted secrets. The secrets' hash algorithm takes
    /// precedence over the one in `config`.
    pub fn with_secrets(mut config: ServerConfig, secrets: ServerSecrets) -> Result<Self, ServerError> {
        config.validate()?;
        config.algorithm = secrets.algorithm;
        Ok(AuthServer {
            secrets,
            config,
            replay: ReplayCache::new(),
        })
    }

    pub fn config(&self) -> &ServerConfig {
        &self.config
    }

    pub fn secrets(&self) -> &ServerSecrets {
        &self.secrets
    }

    pub fn algorithm(&self) -> HashAlgorithm {
        self.secrets.algorithm
    }

    /// Cache entries are kept for twice the freshness window.
    pub fn replay_window(&self) -> u64 {
        self.config.delta_t.saturating_mul(2)
    }

    /// Issues a card. Must only be reachable over the trusted channel.
    pub fn handle_registration(&self, pw: &[u8], id: &[u8]) -> Result<CardImage, ProtocolError> {
        protocol::register(pw, id, &self.secrets)
    }

    pub fn handle_login(&self, req: &LoginRequest, clock: &dyn Clock) -> LoginOutcome {
        let t_s = clock.now();
        self.replay.prune(t_s, self.replay_window());
        let mut verdict = protocol::verify_login(&self.secrets, req, t_s, self.config.delta_t);
        if verdict.is_accept()
            && self.config.mode == Mode::Hardened
            && !self
                .replay
                .check_and_insert(req.proof, req.t_u, t_s, self.replay_window())
        {
            verdict = Verdict::RejectReplay;
        }
        if !verdict.is_accept() {
            return LoginOutcome { verdict, proof: None };
        }
        let recovered = protocol::recover_pw_digest(req, self.secrets.y, self.secrets.algorithm);
        let proof = protocol::build_server_proof(recovered, &self.secrets, req.t_u, clock.now());
        LoginOutcome {
            verdict,
            proof: Some(proof),
        }
    }

    pub fn prune_cache(&self, now: Timestamp) {
        self.replay.prune(now, self.replay_window());
    }

    pub fn replay_cache(&self) -> &ReplayCache {
        &self.replay
    }

    pub fn snapshot(&self) -> StateSnapshot {
        StateSnapshot {
            secrets_file: encode_secrets(&self.secrets),
            config: self.config,
            replay_entries: self.replay.entries(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::card::CardSession;
    use crate::clock::ManualClock;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const START: Timestamp = Timestamp(1_700_000_000_000);

    fn server(mode: Mode, seed: u64) -> AuthServer {
        let config = ServerConfig {
            mode,
            ..ServerConfig::default()
        };
        AuthServer::init(config, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn request(server: &AuthServer, id: &[u8], pw: &[u8], clock: &ManualClock) -> LoginRequest {
        let image = server.handle_registration(pw, id).unwrap();
        let mut card = CardSession::new(image, server.config().delta_t);
        assert!(card.unlock(id, pw));
        card.start_login(clock).unwrap()
    }

    #[test]
    fn init_draws_distinct_secrets() {
        let a = server(Mode::Hardened, 1);
        let b = server(Mode::Hardened, 2);
        assert_ne!(a.secrets().x, b.secrets().x);
        assert_ne!(a.secrets().x, a.secrets().y);
        assert!(a.replay_cache().is_empty());
    }

    #[test]
    fn zero_delta_is_rejected() {
        let config = ServerConfig {
            delta_t: 0,
            ..ServerConfig::default()
        };
        let err = AuthServer::init(config, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, ServerError::InvalidConfig(_)));
    }

    struct FailingRng;

    impl rand::RngCore for FailingRng {
        fn next_u32(&mut self) -> u32 {
            unreachable!()
        }
        fn next_u64(&mut self) -> u64 {
            unreachable!()
        }
        fn fill_bytes(&mut self, _: &mut [u8]) {
            unreachable!()
        }
        fn try_fill_bytes(&mut self, _: &mut [u8]) -> Result<(), rand::Error> {
            Err(rand::Error::new("no entropy"))
        }
    }

    impl rand::CryptoRng for FailingRng {}

    #[test]
    fn entropy_failure_surfaces() {
        let err = AuthServer::init(ServerConfig::default(), &mut FailingRng).unwrap_err();
        assert!(matches!(err, ServerError::Entropy(_)));
    }

    #[test]
    fn restart_from_secrets_file_behaves_identically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("server.secrets");
        let original = server(Mode::Hardened, 3);
        write_secrets_file(&path, original.secrets()).unwrap();
        assert_eq!(fs::metadata(&path).unwrap().len(), SECRETS_FILE_LEN as u64);
        #[cfg(unix)]
        {
            use std::os::unix::fs::PermissionsExt;
            assert_eq!(fs::metadata(&path).unwrap().permissions().mode() & 0o777, 0o600);
        }
        let restarted =
            AuthServer::with_secrets(ServerConfig::default(), read_secrets_file(&path).unwrap()).unwrap();

        let clock = ManualClock::new(START);
        let req = request(&original, b"dave", b"pw", &clock);
        assert_eq!(restarted.handle_login(&req, &clock).verdict, Verdict::Accept);
        assert_eq!(
            original.handle_registration(b"pw", b"dave").unwrap(),
            restarted.handle_registration(b"pw", b"dave").unwrap()
        );
    }

    #[test]
    fn secrets_format_layout_and_errors() {
        let secrets = ServerSecrets::new(HashAlgorithm::Sha256, Block::splat(1), Block::splat(2));
        let bytes = encode_secrets(&secrets);
        assert_eq!(&bytes[..8], b"MLSS\x01\x01\x00\x00");
        assert_eq!(decode_secrets(&bytes).unwrap(), secrets);
        assert!(decode_secrets(&bytes[..71]).is_err());
        let mut bad = bytes;
        bad[0] = 0;
        assert!(decode_secrets(&bad).is_err());
        let mut bad = bytes;
        bad[4] = 9;
        assert!(decode_secrets(&bad).is_err());
        let mut bad = bytes;
        bad[5] = 9;
        assert!(decode_secrets(&bad).is_err());
        let mut bad = bytes;
        bad[7] = 1;
        assert!(decode_secrets(&bad).is_err());
    }

    #[test]
    fn registration_leaves_no_trace() {
        let s = server(Mode::Hardened, 4);
        let before = s.snapshot();
        s.handle_registration(b"pw", b"alice").unwrap();
        s.handle_registration(b"pw2", b"bob").unwrap();
        assert_eq!(s.snapshot(), before);
        assert_eq!(
            s.handle_registration(b"pw", b"alice").unwrap(),
            s.handle_registration(b"pw", b"alice").unwrap()
        );
        assert!(s.handle_registration(b"", b"alice").is_err());
    }

    #[test]
    fn honest_login_returns_proof() {
        let s = server(Mode::Hardened, 5);
        let clock = ManualClock::new(START);
        let req = request(&s, b"alice", b"pw", &clock);
        let out = s.handle_login(&req, &clock);
        assert_eq!(out.verdict, Verdict::Accept);
        assert!(out.proof.is_some());
    }

    #[test]
    fn double_submission_by_mode() {
        for (mode, second) in [
            (Mode::Hardened, Verdict::RejectReplay),
            (Mode::Strict, Verdict::Accept),
        ] {
            let s = server(mode, 6);
            let clock = ManualClock::new(START);
            let req = request(&s, b"alice", b"pw", &clock);
            assert_eq!(s.handle_login(&req, &clock).verdict, Verdict::Accept);
            clock.advance(100);
            let out = s.handle_login(&req, &clock);
            assert_eq!(out.verdict, second, "{mode:?}");
            assert_eq!(out.proof.is_some(), second.is_accept());
        }
    }

    #[test]
    fn stale_replays_fail_in_both_modes() {
        for mode in [Mode::Hardened, Mode::Strict] {
            let s = server(mode, 7);
            let clock = ManualClock::new(START);
            let req = request(&s, b"alice", b"pw", &clock);
            clock.advance(s.config().delta_t + 1);
            assert_eq!(s.handle_login(&req, &clock).verdict, Verdict::RejectStale);
        }
    }

    #[test]
    fn pruning_boundary() {
        let s = server(Mode::Hardened, 8);
        let window = s.replay_window();
        s.prune_cache(START);
        assert!(s.replay_cache().is_empty());

        let cache = s.replay_cache();
        let now = START.saturating_add(window);
        assert!(cache.check_and_insert(Block::splat(1), START, START, window));
        assert!(cache.check_and_insert(Block::splat(2), START.saturating_sub(1), START, window));
        s.prune_cache(now);
        assert_eq!(cache.entries(), vec![(START, Block::splat(1))]);
        s.prune_cache(now.saturating_add(1));
        assert!(cache.is_empty());
    }

    #[test]
    fn wrong_instance_rejects_foreign_requests() {
        let honest = server(Mode::Hardened, 9);
        let other = server(Mode::Hardened, 10);
        let clock = ManualClock::new(START);
        let req = request(&honest, b"alice", b"pw", &clock);
        assert_eq!(other.handle_login(&req, &clock).verdict, Verdict::RejectProof);
    }

    #[test]
    fn concurrent_duplicates_accept_once() {
        let s = std::sync::Arc::new(server(Mode::Hardened, 11));
        let clock = ManualClock::new(START);
        let req = request(&s, b"alice", b"pw", &clock);
        let accepted: usize = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..8)
                .map(|_| {
                    let s = s.clone();
                    let clock = clock.clone();
                    scope.spawn(move || s.handle_login(&req, &clock).verdict.is_accept() as usize)
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).sum()
        });
        assert_eq!(accepted, 1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        // Random interleavings of fresh logins, resubmissions and clock
        // movement: no request is accepted twice, and the cache only holds
        // entries inside the pruning window.
        #[test]
        fn hardened_never_accepts_twice(ops in proptest::collection::vec((0u8..3, 0usize..8, 0u64..90_000), 1..60)) {
            let s = server(Mode::Hardened, 12);
            let clock = ManualClock::new(START);
            let image = s.handle_registration(b"pw", b"alice").unwrap();
            let mut card = CardSession::new(image, s.config().delta_t);
            card.unlock(b"alice", b"pw");
            let mut issued: Vec<LoginRequest> = Vec::new();
            let mut accepted = std::collections::HashSet::new();
            for (op, pick, millis) in ops {
                match op {
                    0 => issued.push(card.start_login(&clock).unwrap()),
                    1 if !issued.is_empty() => {
                        let req = issued[pick % issued.len()];
                        if s.handle_login(&req, &clock).verdict.is_accept() {
                            prop_assert!(accepted.insert(req), "accepted twice: {:?}", req);
                        }
                        let cutoff = clock.now().saturating_sub(s.replay_window());
                        prop_assert!(s.replay_cache().entries().iter().all(|(t, _)| *t >= cutoff));
                    }
                    _ => clock.advance(millis),
                }
                // Small step: keeps requests unique per tick.
                clock.advance(1);
            }
        }
    }
}

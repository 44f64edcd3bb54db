//! Scripted adversaries.
//!
//! Each scenario pairs an honest control arm, which must succeed for the
//! run to mean anything, with an attack arm whose outcome is read off the
//! verdicts in its transcript. [`run_all`] gives every scenario a fresh
//! seeded server on a manual clock, so a `(mode, seed)` pair always yields
//! the same reports.

mod scenarios;
mod target;

use std::fmt::{self, Write as _};
use std::io::{self, Write};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use scenarios::{
    scenario_impersonation, scenario_offline_guess, scenario_replay, scenario_server_spoof,
    scenario_stolen_card, scenario_stolen_verifier, Credentials, Victim,
};
pub use target::{InProcessTarget, LiveTarget, Target};

use crate::card::{CardError, CardFormatError};
use crate::clock::ManualClock;
use crate::primitives::{Block, HashAlgorithm, PrimitiveError, Timestamp};
use crate::protocol::{ProtocolError, ServerSecrets};
use crate::server::{AuthServer, Mode, ServerConfig, ServerError};
use crate::wire::{Message, WireError};

/// Ten common passwords, one per line.
pub const DEFAULT_DICTIONARY: &str = include_str!("../../fixtures/dictionary.txt");

/// Start of every simulated clock.
pub const SIMULATION_EPOCH: Timestamp = Timestamp(1_700_000_000_000);

pub const DEFAULT_FORGERIES: usize = 1000;

#[derive(Debug, Error)]
pub enum RedteamError {
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Card(#[from] CardError),
    #[error(transparent)]
    CardFormat(#[from] CardFormatError),
    #[error(transparent)]
    Server(#[from] ServerError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Encoding(#[from] PrimitiveError),
    #[error("{0}")]
    Unsupported(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Outcome {
    Blocked,
    Succeeded,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Outcome::Blocked => "ATTACK_BLOCKED",
            Outcome::Succeeded => "ATTACK_SUCCEEDED",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    ToServer,
    ToClient,
}

/// Which half of a scenario produced a transcript entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arm {
    Control,
    Attack,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TranscriptEntry {
    pub arm: Arm,
    pub direction: Direction,
    pub message: Message,
    pub at: Timestamp,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScenarioReport {
    pub scenario: ScenarioKind,
    pub outcome: Outcome,
    pub control_ok: bool,
    pub transcript: Vec<TranscriptEntry>,
    pub notes: Vec<String>,
}

impl ScenarioReport {
    pub fn attack_messages(&self) -> impl Iterator<Item = &TranscriptEntry> {
        self.transcript.iter().filter(|e| e.arm == Arm::Attack)
    }

    pub fn record(&self) -> ReportRecord {
        ReportRecord {
            scenario: self.scenario.name().to_string(),
            outcome: self.outcome,
            transcript_len: self.transcript.len(),
            control_ok: self.control_ok,
        }
    }
}

/// One line of the machine-readable report.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub scenario: String,
    pub outcome: Outcome,
    pub transcript_len: usize,
    pub control_ok: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScenarioKind {
    ReplayStale,
    ReplayInWindow,
    Impersonation,
    StolenCard,
    StolenVerifier,
    ServerSpoof,
    OfflineGuess,
    OfflineGuessInsider,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 8] = [
        ScenarioKind::ReplayStale,
        ScenarioKind::ReplayInWindow,
        ScenarioKind::Impersonation,
        ScenarioKind::StolenCard,
        ScenarioKind::StolenVerifier,
        ScenarioKind::ServerSpoof,
        ScenarioKind::OfflineGuess,
        ScenarioKind::OfflineGuessInsider,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::ReplayStale => "replay-stale",
            ScenarioKind::ReplayInWindow => "replay-in-window",
            ScenarioKind::Impersonation => "impersonation",
            ScenarioKind::StolenCard => "stolen-card",
            ScenarioKind::StolenVerifier => "stolen-verifier",
            ScenarioKind::ServerSpoof => "server-spoof",
            ScenarioKind::OfflineGuess => "offline-guess",
            ScenarioKind::OfflineGuessInsider => "offline-guess-insider",
        }
    }

    /// Parses a scenario name; `replay` selects both replay variants and `all` every scenario.
    pub fn parse_selection(s: &str) -> Result<Vec<ScenarioKind>, String> {
        match s {
            "all" => Ok(Self::ALL.to_vec()),
            "replay" => Ok(vec![ScenarioKind::ReplayStale, ScenarioKind::ReplayInWindow]),
            other => other.parse().map(|k| vec![k]),
        }
    }
}

impl FromStr for ScenarioKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown scenario `{s}`"))
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub fn parse_dictionary(text: &str) -> Vec<Vec<u8>> {
    text.lines()
        .map(|l| l.trim_end_matches('\r'))
        .filter(|l| !l.is_empty())
        .map(|l| l.as_bytes().to_vec())
        .collect()
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub mode: Mode,
    pub seed: u64,
    pub delta_t: u64,
    /// `None` runs every scenario.
    pub scenarios: Option<Vec<ScenarioKind>>,
    pub dictionary: Vec<Vec<u8>>,
    pub forgeries: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: Mode::Hardened,
            seed: 0,
            delta_t: crate::server::DEFAULT_DELTA_T_MS,
            scenarios: None,
            dictionary: parse_dictionary(DEFAULT_DICTIONARY),
            forgeries: DEFAULT_FORGERIES,
        }
    }
}

fn scenario_rng(seed: u64, kind: ScenarioKind) -> ChaCha20Rng {
    let index = ScenarioKind::ALL.iter().position(|k| *k == kind).unwrap_or(0) as u64;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(index + 1);
    rng
}

fn random_block(rng: &mut ChaCha20Rng) -> Block {
    use rand::RngCore;
    let mut bytes = [0u8; 32];
    rng.fill_bytes(&mut bytes);
    Block::new(bytes)
}

/// A password no dictionary attack will find.
fn strong_password(rng: &mut ChaCha20Rng) -> Vec<u8> {
    random_block(rng).to_hex().as_bytes()[..24].to_vec()
}

/// Runs the selected scenarios, each against its own freshly seeded server.
pub fn run_all(config: &RunConfig) -> Result<Vec<ScenarioReport>, RedteamError> {
    let kinds = config
        .scenarios
        .clone()
        .unwrap_or_else(|| ScenarioKind::ALL.to_vec());
    kinds
        .into_iter()
        .map(|kind| run_in_process(kind, config))
        .collect()
}

fn run_in_process(kind: ScenarioKind, config: &RunConfig) -> Result<ScenarioReport, RedteamError> {
    let mut rng = scenario_rng(config.seed, kind);
    let server_config = ServerConfig {
        delta_t: config.delta_t,
        mode: config.mode,
        algorithm: HashAlgorithm::Sha256,
    };
    let server = AuthServer::init(server_config, &mut rng)?;
    let mut target = InProcessTarget::new(server, ManualClock::new(SIMULATION_EPOCH));

    let weak = !config.dictionary.is_empty()
        && matches!(
            kind,
            ScenarioKind::OfflineGuess | ScenarioKind::OfflineGuessInsider
        );
    let pw = if weak {
        use rand::Rng;
        config.dictionary[rng.gen_range(0..config.dictionary.len())].clone()
    } else {
        strong_password(&mut rng)
    };
    let creds = Credentials::new(b"alice".to_vec(), pw);
    let server = target.server().expect("in-process target");
    let victim = Victim::new(server.handle_registration(&creds.pw, &creds.id)?, creds);
    let delta_t = config.delta_t;

    match kind {
        ScenarioKind::ReplayStale => scenario_replay(&mut target, &victim, delta_t + 1),
        ScenarioKind::ReplayInWindow => scenario_replay(&mut target, &victim, delta_t / 2),
        ScenarioKind::Impersonation => {
            scenario_impersonation(&mut target, &victim, &mut rng, config.forgeries)
        }
        ScenarioKind::StolenCard => {
            let bytes = crate::card::save_image(&victim.image)?;
            scenario_stolen_card(&bytes, &mut target, &config.dictionary, &victim.creds)
        }
        ScenarioKind::StolenVerifier => {
            let others: Vec<Credentials> = (0..8)
                .map(|i| Credentials::new(format!("user{i}").into_bytes(), strong_password(&mut rng)))
                .collect();
            scenario_stolen_verifier(&mut target, &victim, &others)
        }
        ScenarioKind::ServerSpoof => {
            let honest_y = victim.image.server_secondary;
            let fakes = [
                ServerSecrets::new(HashAlgorithm::Sha256, random_block(&mut rng), honest_y),
                ServerSecrets::new(
                    HashAlgorithm::Sha256,
                    random_block(&mut rng),
                    random_block(&mut rng),
                ),
            ];
            scenario_server_spoof(&mut target, &victim, &fakes)
        }
        ScenarioKind::OfflineGuess => scenario_offline_guess(&mut target, &victim, &config.dictionary, None),
        ScenarioKind::OfflineGuessInsider => {
            let y = victim.image.server_secondary;
            scenario_offline_guess(&mut target, &victim, &config.dictionary, Some(y))
        }
    }
}

/// Runs scenarios against a live server on behalf of the card holder `victim`.
/// `delta_t` must match the server's window.
pub fn run_live(
    kinds: &[ScenarioKind],
    addr: std::net::SocketAddr,
    delta_t: u64,
    victim: &Victim,
    dictionary: &[Vec<u8>],
    seed: u64,
) -> Result<Vec<ScenarioReport>, RedteamError> {
    let mut reports = Vec::new();
    for &kind in kinds {
        let mut rng = scenario_rng(seed, kind);
        let mut target = LiveTarget::connect(addr, delta_t)?;
        let report = match kind {
            ScenarioKind::ReplayStale => scenario_replay(&mut target, victim, delta_t + 1),
            ScenarioKind::ReplayInWindow => scenario_replay(&mut target, victim, delta_t / 2),
            ScenarioKind::Impersonation => {
                scenario_impersonation(&mut target, victim, &mut rng, DEFAULT_FORGERIES)
            }
            ScenarioKind::StolenCard => {
                let bytes = crate::card::save_image(&victim.image)?;
                scenario_stolen_card(&bytes, &mut target, dictionary, &victim.creds)
            }
            ScenarioKind::StolenVerifier => {
                return Err(RedteamError::Unsupported(
                    "stolen-verifier inspects server memory and only runs in-process".into(),
                ))
            }
            ScenarioKind::ServerSpoof => {
                let y = victim.image.server_secondary;
                let fakes = [
                    ServerSecrets::new(victim.image.algorithm, random_block(&mut rng), y),
                    ServerSecrets::new(
                        victim.image.algorithm,
                        random_block(&mut rng),
                        random_block(&mut rng),
                    ),
                ];
                scenario_server_spoof(&mut target, victim, &fakes)
            }
            ScenarioKind::OfflineGuess => scenario_offline_guess(&mut target, victim, dictionary, None),
            ScenarioKind::OfflineGuessInsider => {
                let y = victim.image.server_secondary;
                scenario_offline_guess(&mut target, victim, dictionary, Some(y))
            }
        }?;
        reports.push(report);
    }
    Ok(reports)
}

pub fn write_report<W: Write>(mut out: W, reports: &[ScenarioReport]) -> io::Result<()> {
    for report in reports {
        serde_json::to_writer(&mut out, &report.record())?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn read_report(text: &str) -> Result<Vec<ReportRecord>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

pub fn summary_table(reports: &[ScenarioReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<24} {:<18} {:>10} {:>8}",
        "scenario", "outcome", "transcript", "control"
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{:<24} {:<18} {:>10} {:>8}",
            r.scenario.name(),
            r.outcome.to_string(),
            r.transcript.len(),
            if r.control_ok { "ok" } else { "FAILED" }
        );
    }
    out
}

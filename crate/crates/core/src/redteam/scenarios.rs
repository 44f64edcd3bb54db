use std::fmt;

use rand::RngCore;

use crate::card::{self, CardSession, LockState};
use crate::primitives::{Block, Timestamp};
use crate::protocol::{self, CardImage, LoginRequest, ServerSecrets, Verdict};
use crate::wire::Message;

use super::{Arm, Direction, Outcome, RedteamError, ScenarioKind, ScenarioReport, Target, TranscriptEntry};

#[derive(Clone, PartialEq, Eq)]
pub struct Credentials {
    pub id: Vec<u8>,
    pub pw: Vec<u8>,
}

impl Credentials {
    pub fn new(id: Vec<u8>, pw: Vec<u8>) -> Self {
        Credentials { id, pw }
    }
}

impl fmt::Debug for Credentials {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Credentials")
            .field("id", &String::from_utf8_lossy(&self.id))
            .finish_non_exhaustive()
    }
}

/// An honest card holder: their card and what they type into the terminal.
#[derive(Clone, Debug)]
pub struct Victim {
    pub image: CardImage,
    pub creds: Credentials,
}

impl Victim {
    pub fn new(image: CardImage, creds: Credentials) -> Self {
        Victim { image, creds }
    }
}

#[derive(Default)]
struct Recorder {
    transcript: Vec<TranscriptEntry>,
    notes: Vec<String>,
}

impl Recorder {
    fn log(&mut self, arm: Arm, direction: Direction, message: Message, at: Timestamp) {
        self.transcript.push(TranscriptEntry {
            arm,
            direction,
            message,
            at,
        });
    }

    fn submit<T: Target + ?Sized>(
        &mut self,
        target: &mut T,
        arm: Arm,
        req: &LoginRequest,
    ) -> Result<(Message, Option<Verdict>), RedteamError> {
        self.log(
            arm,
            Direction::ToServer,
            Message::LoginRequest(*req),
            target.now(),
        );
        let (reply, verdict) = target.submit(req)?;
        self.log(arm, Direction::ToClient, reply.clone(), target.now());
        Ok((reply, verdict))
    }

    fn note(&mut self, note: impl Into<String>) {
        self.notes.push(note.into());
    }

    fn finish(self, scenario: ScenarioKind, outcome: Outcome, control_ok: bool) -> ScenarioReport {
        ScenarioReport {
            scenario,
            outcome,
            control_ok,
            transcript: self.transcript,
            notes: self.notes,
        }
    }
}

fn accepted(reply: &Message) -> bool {
    matches!(reply, Message::LoginAccept(_))
}

fn describe(reply: &Message, verdict: Option<Verdict>) -> String {
    match verdict {
        Some(v) => v.to_string(),
        None => reply.name().to_string(),
    }
}

/// The victim's honest handshake. Returns their request and whether both
/// directions authenticated.
fn honest_login<T: Target + ?Sized>(
    target: &mut T,
    victim: &Victim,
    rec: &mut Recorder,
) -> Result<(Option<LoginRequest>, bool), RedteamError> {
    let mut session = CardSession::new(victim.image.clone(), target.delta_t());
    if !session.unlock(&victim.creds.id, &victim.creds.pw) {
        rec.note("control: card refused the owner's credentials");
        return Ok((None, false));
    }
    // Back-to-back logins in one millisecond would repeat (C, t_u).
    target.wait(1);
    let req = session.start_login(target.clock())?;
    let (reply, verdict) = rec.submit(target, Arm::Control, &req)?;
    let ok = match &reply {
        Message::LoginAccept(proof) => session.finish_login(proof, target.clock())?,
        _ => false,
    };
    rec.note(format!(
        "control: honest login {} / server {}",
        describe(&reply, verdict),
        if ok { "authenticated" } else { "NOT authenticated" }
    ));
    Ok((Some(req), ok))
}

/// Captures an honest request, waits `delay` ms and submits it again.
pub fn scenario_replay<T: Target + ?Sized>(
    target: &mut T,
    victim: &Victim,
    delay: u64,
) -> Result<ScenarioReport, RedteamError> {
    let kind = if delay > target.delta_t() {
        ScenarioKind::ReplayStale
    } else {
        ScenarioKind::ReplayInWindow
    };
    let mut rec = Recorder::default();
    let (captured, control_ok) = honest_login(target, victim, &mut rec)?;
    let Some(captured) = captured else {
        return Ok(rec.finish(kind, Outcome::Blocked, false));
    };
    target.wait(delay);
    let (reply, verdict) = rec.submit(target, Arm::Attack, &captured)?;
    rec.note(format!(
        "replayed after {delay} ms (window {} ms): {}",
        target.delta_t(),
        describe(&reply, verdict)
    ));
    let outcome = if accepted(&reply) {
        Outcome::Succeeded
    } else {
        Outcome::Blocked
    };
    Ok(rec.finish(kind, outcome, control_ok))
}

/// Forges requests around an intercepted dynamic id: fresh timestamps with
/// random proofs, the intercepted proof, and a proof recomputed by someone
/// who knows the password but not `y`.
pub fn scenario_impersonation<T: Target + ?Sized, R: RngCore>(
    target: &mut T,
    victim: &Victim,
    rng: &mut R,
    forgeries: usize,
) -> Result<ScenarioReport, RedteamError> {
    let kind = ScenarioKind::Impersonation;
    let mut rec = Recorder::default();
    let (captured, control_ok) = honest_login(target, victim, &mut rec)?;
    let Some(captured) = captured else {
        return Ok(rec.finish(kind, Outcome::Blocked, false));
    };
    target.wait(1);

    let mut random_block = || {
        let mut bytes = [0u8; 32];
        rng.fill_bytes(&mut bytes);
        Block::new(bytes)
    };

    let mut forged = Vec::with_capacity(forgeries + 2);
    for _ in 0..forgeries {
        forged.push(LoginRequest {
            did: captured.did,
            proof: random_block(),
            t_u: target.now(),
        });
    }
    forged.push(LoginRequest {
        t_u: target.now(),
        ..captured
    });
    let alg = victim.image.algorithm;
    let pair = alg.digest_pair(&victim.creds.pw, &victim.creds.id)?;
    let guessed_y = random_block();
    let t = target.now();
    forged.push(LoginRequest {
        did: pair ^ alg.digest((guessed_y ^ t.to_block()).as_bytes()),
        proof: alg.digest((pair ^ t.to_block() ^ guessed_y).as_bytes()),
        t_u: t,
    });

    let mut accepted_count = 0usize;
    for req in &forged {
        let (reply, _) = rec.submit(target, Arm::Attack, req)?;
        accepted_count += accepted(&reply) as usize;
    }
    rec.note(format!(
        "{} forged requests, {accepted_count} accepted",
        forged.len()
    ));
    let outcome = if accepted_count == 0 {
        Outcome::Blocked
    } else {
        Outcome::Succeeded
    };
    Ok(rec.finish(kind, outcome, control_ok))
}

/// The attacker holds the card file and tries passwords from `dictionary`.
pub fn scenario_stolen_card<T: Target + ?Sized>(
    card_image_bytes: &[u8],
    target: &mut T,
    dictionary: &[Vec<u8>],
    owner: &Credentials,
) -> Result<ScenarioReport, RedteamError> {
    let kind = ScenarioKind::StolenCard;
    let mut rec = Recorder::default();
    let image = card::load_image(card_image_bytes)?;
    let mut session = CardSession::new(image.clone(), target.delta_t());

    let mut attempts = 0;
    let mut unlocked = false;
    for guess in dictionary {
        if session.lock_state() == LockState::LockedOut {
            break;
        }
        attempts += 1;
        if session.unlock(&image.id, guess) {
            unlocked = true;
            break;
        }
    }

    let outcome = if unlocked {
        rec.note(format!("password guessed after {attempts} attempts"));
        let req = session.start_login(target.clock())?;
        let (reply, _) = rec.submit(target, Arm::Attack, &req)?;
        if accepted(&reply) {
            Outcome::Succeeded
        } else {
            Outcome::Blocked
        }
    } else {
        let locked_out = session.lock_state() == LockState::LockedOut;
        let change = session.change_password(b"attacker-chosen");
        let login = session.start_login(target.clock());
        rec.note(format!(
            "{attempts} wrong guesses; card {}; change-password: {}; login: {}",
            if locked_out { "LOCKED_OUT" } else { "still locked" },
            change.map_or_else(|e| format!("refused ({e})"), |_| "ALLOWED".into()),
            login
                .as_ref()
                .map_or_else(|e| format!("refused ({e})"), |_| "ALLOWED".into()),
        ));
        if locked_out && session.image() == &image && login.is_err() {
            Outcome::Blocked
        } else {
            Outcome::Succeeded
        }
    };
    if rec.transcript.iter().all(|e| e.arm != Arm::Attack) {
        rec.note("attack arm produced no network traffic");
    }

    // The owner reloads the card and logs in normally.
    let owner_victim = Victim::new(card::load_image(card_image_bytes)?, owner.clone());
    let (_, control_ok) = honest_login(target, &owner_victim, &mut rec)?;
    Ok(rec.finish(kind, outcome, control_ok))
}

/// An insider dumps everything the server retains after issuing cards and
/// serving a login, and searches it for per-user password material.
pub fn scenario_stolen_verifier<T: Target + ?Sized>(
    target: &mut T,
    victim: &Victim,
    others: &[Credentials],
) -> Result<ScenarioReport, RedteamError> {
    let kind = ScenarioKind::StolenVerifier;
    let mut rec = Recorder::default();
    let Some(server) = target.server() else {
        return Err(RedteamError::Unsupported(
            "stolen-verifier needs an in-process server".into(),
        ));
    };
    let mut users = vec![(victim.creds.clone(), victim.image.clone())];
    for creds in others {
        let image = server.handle_registration(&creds.pw, &creds.id)?;
        users.push((creds.clone(), image));
    }
    let (_, control_ok) = honest_login(target, victim, &mut rec)?;

    let server = target.server().expect("checked above");
    let snapshot = server.snapshot();
    let mut dump = snapshot.secrets_file.to_vec();
    for (t, block) in &snapshot.replay_entries {
        dump.extend_from_slice(&t.millis().to_be_bytes());
        dump.extend_from_slice(block.as_bytes());
    }

    let mut leaks = 0usize;
    for (creds, image) in &users {
        let alg = image.algorithm;
        let needles: [Vec<u8>; 4] = [
            creds.pw.clone(),
            alg.digest(&creds.pw).as_bytes().to_vec(),
            alg.digest_pair(&creds.pw, &creds.id)?.as_bytes().to_vec(),
            image.nonce.as_bytes().to_vec(),
        ];
        leaks += needles
            .iter()
            .filter(|n| dump.windows(n.len()).any(|w| w == n.as_slice()))
            .count();
    }
    rec.note(format!(
        "server state: {} bytes ({}-byte secrets file, {} replay entries) for {} users; {leaks} per-user values found",
        dump.len(),
        snapshot.secrets_file.len(),
        snapshot.replay_entries.len(),
        users.len()
    ));
    let outcome = if leaks == 0 {
        Outcome::Blocked
    } else {
        Outcome::Succeeded
    };
    Ok(rec.finish(kind, outcome, control_ok))
}

/// A fake server answers the card with proofs built from each of `fakes`.
pub fn scenario_server_spoof<T: Target + ?Sized>(
    target: &mut T,
    victim: &Victim,
    fakes: &[ServerSecrets],
) -> Result<ScenarioReport, RedteamError> {
    let kind = ScenarioKind::ServerSpoof;
    let mut rec = Recorder::default();
    let (_, control_ok) = honest_login(target, victim, &mut rec)?;

    let mut fooled = 0usize;
    for fake in fakes {
        let mut session = CardSession::new(victim.image.clone(), target.delta_t());
        if !session.unlock(&victim.creds.id, &victim.creds.pw) {
            return Ok(rec.finish(kind, Outcome::Blocked, false));
        }
        let req = session.start_login(target.clock())?;
        rec.log(
            Arm::Attack,
            Direction::ToServer,
            Message::LoginRequest(req),
            target.now(),
        );
        let recovered = protocol::recover_pw_digest(&req, fake.y, fake.algorithm);
        let proof = protocol::build_server_proof(recovered, fake, req.t_u, target.now());
        rec.log(
            Arm::Attack,
            Direction::ToClient,
            Message::LoginAccept(proof),
            target.now(),
        );
        let convinced = session.finish_login(&proof, target.clock())?;
        rec.note(format!(
            "fake server ({} y): card {}",
            if fake.y == victim.image.server_secondary {
                "honest"
            } else {
                "fake"
            },
            if convinced {
                "ACCEPTED the proof"
            } else {
                "rejected the proof"
            }
        ));
        fooled += convinced as usize;
    }
    let outcome = if fooled == 0 {
        Outcome::Blocked
    } else {
        Outcome::Succeeded
    };
    Ok(rec.finish(kind, outcome, control_ok))
}

/// Offline dictionary attack on an intercepted request. Without `y` there
/// is no equation to test a guess against; with `y` (any card holder has
/// it) the dynamic id unmasks to `h(PW, ID)`.
pub fn scenario_offline_guess<T: Target + ?Sized>(
    target: &mut T,
    victim: &Victim,
    dictionary: &[Vec<u8>],
    known_y: Option<Block>,
) -> Result<ScenarioReport, RedteamError> {
    let kind = if known_y.is_some() {
        ScenarioKind::OfflineGuessInsider
    } else {
        ScenarioKind::OfflineGuess
    };
    let mut rec = Recorder::default();
    let (captured, control_ok) = honest_login(target, victim, &mut rec)?;
    let Some(captured) = captured else {
        return Ok(rec.finish(kind, Outcome::Blocked, false));
    };
    let Some(y) = known_y else {
        rec.note("without y no function of the transcript can confirm a guess");
        return Ok(rec.finish(kind, Outcome::Blocked, control_ok));
    };

    let alg = victim.image.algorithm;
    let target_digest = protocol::recover_pw_digest(&captured, y, alg);
    let id = &victim.image.id;
    let mut found = None;
    for (tried, candidate) in dictionary.iter().enumerate() {
        if alg.digest_pair(candidate, id)?.ct_eq(&target_digest) {
            found = Some((tried + 1, candidate));
            break;
        }
    }
    let outcome = match found {
        Some((tried, pw)) => {
            rec.note(format!(
                "password `{}` recovered after {tried} guesses using y from a card",
                String::from_utf8_lossy(pw)
            ));
            Outcome::Succeeded
        }
        None => {
            rec.note(format!("{} guesses, none matched", dictionary.len()));
            Outcome::Blocked
        }
    };
    Ok(rec.finish(kind, outcome, control_ok))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;
    use crate::primitives::HashAlgorithm;
    use crate::redteam::{InProcessTarget, SIMULATION_EPOCH};
    use crate::server::{AuthServer, Mode, ServerConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(mode: Mode, pw: &[u8]) -> (InProcessTarget, Victim) {
        let config = ServerConfig {
            mode,
            ..ServerConfig::default()
        };
        let server = AuthServer::init(config, &mut ChaCha8Rng::seed_from_u64(77)).unwrap();
        let creds = Credentials::new(b"alice".to_vec(), pw.to_vec());
        let victim = Victim::new(server.handle_registration(pw, b"alice").unwrap(), creds);
        (
            InProcessTarget::new(server, ManualClock::new(SIMULATION_EPOCH)),
            victim,
        )
    }

    #[test]
    fn stale_replay_blocked_in_both_modes() {
        for mode in [Mode::Hardened, Mode::Strict] {
            let (mut target, victim) = setup(mode, b"pw");
            let delta = target.delta_t();
            let report = scenario_replay(&mut target, &victim, delta + 1).unwrap();
            assert_eq!(report.scenario, ScenarioKind::ReplayStale);
            assert_eq!(report.outcome, Outcome::Blocked);
            assert!(report.control_ok);
            assert!(report.notes.iter().any(|n| n.contains("REJECT_STALE")));
        }
    }

    #[test]
    fn in_window_replay_depends_on_mode() {
        let (mut target, victim) = setup(Mode::Hardened, b"pw");
        let half = target.delta_t() / 2;
        let report = scenario_replay(&mut target, &victim, half).unwrap();
        assert_eq!(report.outcome, Outcome::Blocked);
        assert!(report.notes.iter().any(|n| n.contains("REJECT_REPLAY")));

        let (mut target, victim) = setup(Mode::Strict, b"pw");
        let report = scenario_replay(&mut target, &victim, half).unwrap();
        assert_eq!(report.outcome, Outcome::Succeeded);
    }

    #[test]
    fn thousand_forgeries_none_accepted() {
        let (mut target, victim) = setup(Mode::Hardened, b"pw");
        let report =
            scenario_impersonation(&mut target, &victim, &mut ChaCha8Rng::seed_from_u64(1), 1000).unwrap();
        assert_eq!(report.outcome, Outcome::Blocked);
        assert!(report.control_ok);
        assert_eq!(report.attack_messages().count(), 2 * 1002);
        assert!(report
            .notes
            .iter()
            .any(|n| n == "1002 forged requests, 0 accepted"));
    }

    #[test]
    fn stolen_card_locks_out_without_traffic() {
        let (mut target, victim) = setup(Mode::Hardened, b"Str0ng-and-long");
        let bytes = card::save_image(&victim.image).unwrap();
        let guesses: Vec<Vec<u8>> = vec![b"a".to_vec(), b"b".to_vec(), b"c".to_vec(), b"d".to_vec()];
        let report = scenario_stolen_card(&bytes, &mut target, &guesses, &victim.creds).unwrap();
        assert_eq!(report.outcome, Outcome::Blocked);
        assert_eq!(report.attack_messages().count(), 0);
        assert!(report.control_ok);
        assert!(report.notes[0].starts_with("3 wrong guesses; card LOCKED_OUT"));
    }

    #[test]
    fn stolen_card_with_guessable_password_succeeds() {
        let (mut target, victim) = setup(Mode::Hardened, b"letmein");
        let bytes = card::save_image(&victim.image).unwrap();
        let guesses = vec![b"123456".to_vec(), b"letmein".to_vec()];
        let report = scenario_stolen_card(&bytes, &mut target, &guesses, &victim.creds).unwrap();
        assert_eq!(report.outcome, Outcome::Succeeded);
    }

    #[test]
    fn stolen_verifier_finds_nothing() {
        let (mut target, victim) = setup(Mode::Hardened, b"pw");
        let others = vec![Credentials::new(b"bob".to_vec(), b"pw".to_vec())];
        let report = scenario_stolen_verifier(&mut target, &victim, &others).unwrap();
        assert_eq!(report.outcome, Outcome::Blocked);
        assert!(report.control_ok);
    }

    #[test]
    fn spoofed_server_is_detected() {
        let (mut target, victim) = setup(Mode::Hardened, b"pw");
        let y = victim.image.server_secondary;
        let fakes = [
            ServerSecrets::new(HashAlgorithm::Sha256, Block::splat(1), y),
            ServerSecrets::new(HashAlgorithm::Sha256, Block::splat(1), Block::splat(2)),
        ];
        let report = scenario_server_spoof(&mut target, &victim, &fakes).unwrap();
        assert_eq!(report.outcome, Outcome::Blocked);
        assert!(report.control_ok);

        // Control: with the real secrets the card is convinced.
        let real = target.server().unwrap().secrets().clone();
        let report = scenario_server_spoof(&mut target, &victim, &[real]).unwrap();
        assert_eq!(report.outcome, Outcome::Succeeded);
    }

    #[test]
    fn offline_guessing_needs_y_and_a_hit() {
        let dict: Vec<Vec<u8>> = super::super::parse_dictionary(super::super::DEFAULT_DICTIONARY);
        let (mut target, victim) = setup(Mode::Hardened, b"dragon");
        let y = victim.image.server_secondary;
        let report = scenario_offline_guess(&mut target, &victim, &dict, Some(y)).unwrap();
        assert_eq!(report.outcome, Outcome::Succeeded);
        assert!(report.notes.iter().any(|n| n.contains("`dragon`")));

        let report = scenario_offline_guess(&mut target, &victim, &dict, None).unwrap();
        assert_eq!(report.outcome, Outcome::Blocked);

        let (mut target, victim) = setup(Mode::Hardened, b"not-in-the-list");
        let report = scenario_offline_guess(&mut target, &victim, &dict, Some(y)).unwrap();
        assert_eq!(report.outcome, Outcome::Blocked);
    }
}

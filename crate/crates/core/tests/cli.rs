mod common;

use std::fs;
use std::net::TcpListener;
use std::thread;

use cardauth::wire::{read_message, write_message, Message, PROTOCOL_VERSION};
use cardauth::{Block, Clock, ServerProof, SystemClock};
use common::{code, run, stdout, ServeProcess};

fn register_card(server: &ServeProcess, dir: &std::path::Path, id: &str, pw: &str) -> String {
    let card = dir.join(format!("{id}.card"));
    let card = card.to_str().unwrap().to_string();
    let out = run(
        &[
            "register",
            "--server",
            &server.trusted,
            "--id",
            id,
            "--password-prompt",
            "--out",
            &card,
        ],
        &format!("{pw}\n"),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    card
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&run(&["--help"], "")), 0);
    assert_eq!(code(&run(&["--version"], "")), 0);
    assert_eq!(code(&run(&["login", "--help"], "")), 0);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&run(&[], "")), 1);
    assert_eq!(code(&run(&["frobnicate"], "")), 1);
    assert_eq!(code(&run(&["login", "--card", "x.card"], "")), 1);
    assert_eq!(
        code(&run(&["serve", "--secrets", "s", "--mode", "lenient"], "")),
        1
    );
    assert_eq!(code(&run(&["attack", "no-such-scenario"], "")), 1);
}

#[test]
fn serve_creates_private_secrets_and_survives_restart() {
    let dir = tempfile::tempdir().unwrap();
    let secrets = dir.path().join("server.secrets");
    let card = {
        let server = ServeProcess::start(&secrets, &[]);
        register_card(&server, dir.path(), "alice", "pw1")
    };
    let meta = fs::metadata(&secrets).unwrap();
    assert_eq!(meta.len(), 72);
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        assert_eq!(meta.permissions().mode() & 0o777, 0o600);
    }
    let before = fs::read(&secrets).unwrap();

    let server = ServeProcess::start(&secrets, &[]);
    let out = run(
        &["login", "--card", &card, "--server", &server.public],
        "alice\npw1\n",
    );
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    assert!(stdout(&out).contains("ACCEPTED"));
    assert_eq!(fs::read(&secrets).unwrap(), before);
}

#[test]
fn local_unlock_failure_needs_no_server() {
    let dir = tempfile::tempdir().unwrap();
    let server = ServeProcess::start(&dir.path().join("s"), &[]);
    let card = register_card(&server, dir.path(), "alice", "pw1");
    drop(server);
    // Nothing listens on port 1; reaching the network would exit 2 instead.
    let out = run(
        &["login", "--card", &card, "--server", "127.0.0.1:1"],
        "alice\nwrong\n",
    );
    assert_eq!(code(&out), 4);
    let out = run(
        &["login", "--card", &card, "--server", "127.0.0.1:1"],
        "mallory\npw1\n",
    );
    assert_eq!(code(&out), 4);
    let out = run(
        &["login", "--card", &card, "--server", "127.0.0.1:1"],
        "alice\npw1\n",
    );
    assert_eq!(code(&out), 2);
}

#[test]
fn unreadable_card_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let bogus = dir.path().join("bogus.card");
    fs::write(&bogus, b"not a card").unwrap();
    let bogus = bogus.to_str().unwrap();
    assert_eq!(
        code(&run(
            &["login", "--card", bogus, "--server", "127.0.0.1:1"],
            "a\nb\n"
        )),
        2
    );
    assert_eq!(
        code(&run(
            &["change-password", "--card", "/nonexistent/x.card"],
            "a\nb\nc\n"
        )),
        2
    );
}

#[test]
fn registration_on_public_listener_fails() {
    let dir = tempfile::tempdir().unwrap();
    let server = ServeProcess::start(&dir.path().join("s"), &[]);
    let card = dir.path().join("m.card");
    let out = run(
        &[
            "register",
            "--server",
            &server.public,
            "--id",
            "m",
            "--out",
            card.to_str().unwrap(),
        ],
        "pw\n",
    );
    assert_eq!(code(&out), 3);
    assert!(!card.exists());
}

#[test]
fn card_from_another_server_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let a = ServeProcess::start(&dir.path().join("a"), &[]);
    let b = ServeProcess::start(&dir.path().join("b"), &[]);
    let card = register_card(&a, dir.path(), "alice", "pw1");
    let out = run(&["login", "--card", &card, "--server", &b.public], "alice\npw1\n");
    assert_eq!(code(&out), 4);
    assert!(stdout(&out).contains("REJECTED"));
}

#[test]
fn algorithm_mismatch_is_a_protocol_error() {
    let dir = tempfile::tempdir().unwrap();
    let a = ServeProcess::start(&dir.path().join("a"), &[]);
    let b = ServeProcess::start(&dir.path().join("b"), &["--algorithm", "sha512-256"]);
    let card = register_card(&a, dir.path(), "alice", "pw1");
    let out = run(&["login", "--card", &card, "--server", &b.public], "alice\npw1\n");
    assert_eq!(code(&out), 3);
}

#[test]
fn bogus_server_proof_exits_five() {
    let dir = tempfile::tempdir().unwrap();
    let real = ServeProcess::start(&dir.path().join("s"), &[]);
    let card = register_card(&real, dir.path(), "alice", "pw1");

    let fake = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = fake.local_addr().unwrap().to_string();
    let responder = thread::spawn(move || {
        let (stream, _) = fake.accept().unwrap();
        let mut reader = stream.try_clone().unwrap();
        let mut writer = stream;
        assert!(matches!(
            read_message(&mut reader).unwrap(),
            Some(Message::Hello { .. })
        ));
        write_message(
            &mut writer,
            &Message::Hello {
                version: PROTOCOL_VERSION,
                algorithm_id: 0x01,
            },
        )
        .unwrap();
        assert!(matches!(
            read_message(&mut reader).unwrap(),
            Some(Message::LoginRequest(_))
        ));
        let proof = ServerProof {
            x_proof: Block::splat(0x5a),
            t_s_star: SystemClock.now(),
        };
        write_message(&mut writer, &Message::LoginAccept(proof)).unwrap();
    });
    let out = run(&["login", "--card", &card, "--server", &addr], "alice\npw1\n");
    responder.join().unwrap();
    assert_eq!(code(&out), 5, "{}", stdout(&out));
}

#[test]
fn change_password_with_wrong_password_leaves_card_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let server = ServeProcess::start(&dir.path().join("s"), &[]);
    let card = register_card(&server, dir.path(), "alice", "pw1");
    let before = fs::read(&card).unwrap();
    let out = run(&["change-password", "--card", &card], "alice\nwrong\nnew\n");
    assert_eq!(code(&out), 4);
    assert_eq!(fs::read(&card).unwrap(), before);
}

#[test]
fn attack_in_process_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report.jsonl");
    let out = run(
        &[
            "attack",
            "all",
            "--seed",
            "3",
            "--report",
            report.to_str().unwrap(),
        ],
        "",
    );
    assert_eq!(code(&out), 0);
    let records = cardauth::redteam::read_report(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(records.len(), cardauth::redteam::ScenarioKind::ALL.len());
    for r in &records {
        assert!(r.control_ok);
        let expected = if r.scenario == "offline-guess-insider" {
            "SUCCEEDED"
        } else {
            "BLOCKED"
        };
        assert_eq!(
            serde_json::to_value(r.outcome).unwrap(),
            expected,
            "{}",
            r.scenario
        );
    }
    assert!(stdout(&out).contains("ATTACK_BLOCKED"));
}

#[test]
fn attack_strict_mode_shows_in_window_replay() {
    let out = run(&["attack", "replay", "--mode", "strict"], "");
    assert_eq!(code(&out), 0);
    let table = stdout(&out);
    let line = table.lines().find(|l| l.starts_with("replay-in-window")).unwrap();
    assert!(line.contains("ATTACK_SUCCEEDED"), "{table}");
    let line = table.lines().find(|l| l.starts_with("replay-stale")).unwrap();
    assert!(line.contains("ATTACK_BLOCKED"), "{table}");
}

#[test]
fn attack_live_server() {
    let dir = tempfile::tempdir().unwrap();
    let server = ServeProcess::start(&dir.path().join("s"), &["--delta-t", "300"]);
    let card = register_card(&server, dir.path(), "alice", "letmein");
    let out = run(
        &[
            "attack",
            "all",
            "--server",
            &server.public,
            "--card",
            &card,
            "--delta-t",
            "300",
        ],
        "alice\nletmein\n",
    );
    assert_eq!(
        code(&out),
        0,
        "{}\n{}",
        stdout(&out),
        String::from_utf8_lossy(&out.stderr)
    );
    let table = stdout(&out);
    for name in [
        "replay-stale",
        "replay-in-window",
        "impersonation",
        "stolen-card",
        "server-spoof",
    ] {
        let line = table
            .lines()
            .find(|l| l.starts_with(name))
            .unwrap_or_else(|| panic!("{table}"));
        assert!(line.contains("ATTACK_BLOCKED"), "{table}");
    }
}

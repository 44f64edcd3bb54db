#![allow(dead_code)]

use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};

pub const BIN: &str = env!("CARGO_BIN_EXE_cardauth");

/// A `cardauth serve` child process, killed on drop.
pub struct ServeProcess {
    child: Child,
    // Held open so later status lines do not hit a closed pipe.
    _stdout: std::io::Lines<BufReader<std::process::ChildStdout>>,
    pub public: String,
    pub trusted: String,
}

impl ServeProcess {
    pub fn start(secrets: &Path, extra: &[&str]) -> ServeProcess {
        let mut child = Command::new(BIN)
            .arg("serve")
            .arg("--secrets")
            .arg(secrets)
            .args(["--listen", "127.0.0.1:0", "--trusted-listen", "127.0.0.1:0"])
            .args(extra)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .expect("spawn serve");
        let mut lines = BufReader::new(child.stdout.take().unwrap()).lines();
        let mut field = |prefix: &str| {
            let line = lines.next().expect("serve exited early").unwrap();
            line.strip_prefix(prefix)
                .unwrap_or_else(|| panic!("unexpected serve output `{line}`"))
                .to_string()
        };
        let public = field("public listener: ");
        let trusted = field("trusted listener: ");
        ServeProcess {
            child,
            _stdout: lines,
            public,
            trusted,
        }
    }
}

impl Drop for ServeProcess {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Runs the binary with `stdin` piped in.
pub fn run(args: &[&str], stdin: &str) -> Output {
    let mut child = Command::new(BIN)
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .expect("spawn cardauth");
    child.stdin.take().unwrap().write_all(stdin.as_bytes()).unwrap();
    child.wait_with_output().unwrap()
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("terminated by signal")
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

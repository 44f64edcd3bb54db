//! The `cardauth` operator CLI.
//!
//! Exit codes: 0 success, 1 usage, 2 I/O, 3 protocol, 4 authentication
//! failure, 5 the server failed to authenticate itself.

use std::ffi::OsString;
use std::fs;
use std::io::{self, BufRead, IsTerminal, Write};
use std::net::{SocketAddr, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use rand::rngs::OsRng;
use zeroize::Zeroizing;

use crate::card::{self, CardError, CardFormatError, CardSession};
use crate::clock::{Clock, SystemClock};
use crate::primitives::HashAlgorithm;
use crate::redteam::{self, Credentials, RedteamError, RunConfig, ScenarioKind, Victim};
use crate::server::{self, AuthServer, Mode, ServerConfig, ServerError, DEFAULT_DELTA_T_MS};
use crate::wire::{self, Client, LoginReply, WireError};

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_IO: u8 = 2;
pub const EXIT_PROTOCOL: u8 = 3;
pub const EXIT_AUTH: u8 = 4;
pub const EXIT_SERVER_AUTH: u8 = 5;

#[derive(Parser, Debug)]
#[command(
    name = "cardauth",
    version,
    about = "Smart-card mutual authentication toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the authentication server.
    Serve(ServeArgs),
    /// Obtain a personalized card over the trusted registration listener.
    Register(RegisterArgs),
    /// Run the mutual authentication handshake with a card.
    Login(LoginArgs),
    /// Change the card password offline.
    ChangePassword(ChangePasswordArgs),
    /// Run red-team scenarios, in-process or against a live server.
    Attack(AttackArgs),
}

#[derive(Args, Debug)]
struct ServeArgs {
    /// Secrets file; created with fresh secrets if it does not exist.
    #[arg(long, env = "CARDAUTH_SECRETS")]
    secrets: PathBuf,
    #[arg(long, default_value_t = DEFAULT_DELTA_T_MS)]
    delta_t: u64,
    #[arg(long, default_value = "hardened")]
    mode: Mode,
    #[arg(long, default_value = "127.0.0.1:7700")]
    listen: String,
    /// Loopback address that serves registration.
    #[arg(long, default_value = "127.0.0.1:7701")]
    trusted_listen: String,
    /// Hash for newly generated secrets: sha256 or sha512-256.
    #[arg(long, default_value = "sha256", value_parser = parse_algorithm)]
    algorithm: HashAlgorithm,
}

#[derive(Args, Debug)]
struct RegisterArgs {
    /// Address of the trusted registration listener.
    #[arg(long)]
    server: String,
    #[arg(long)]
    id: String,
    /// Read the password from the terminal (or stdin when not a terminal).
    #[arg(long)]
    password_prompt: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct LoginArgs {
    #[arg(long)]
    card: PathBuf,
    #[arg(long)]
    server: String,
    /// Window the card allows for the server's answer.
    #[arg(long, default_value_t = DEFAULT_DELTA_T_MS)]
    delta_t: u64,
}

#[derive(Args, Debug)]
struct ChangePasswordArgs {
    #[arg(long)]
    card: PathBuf,
}

#[derive(Args, Debug)]
struct AttackArgs {
    /// Scenario name, `replay` or `all`.
    scenario: String,
    /// Attack a live server (public listener) instead of in-process instances.
    #[arg(long, requires = "card")]
    server: Option<String>,
    /// The victim's card; its owner is prompted for identity and password.
    #[arg(long)]
    card: Option<PathBuf>,
    #[arg(long, default_value = "hardened")]
    mode: Mode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_DELTA_T_MS)]
    delta_t: u64,
    /// Guessing dictionary, one candidate per line.
    #[arg(long)]
    dictionary: Option<PathBuf>,
    /// Write one JSON record per scenario to this file.
    #[arg(long)]
    report: Option<PathBuf>,
}

fn parse_algorithm(s: &str) -> Result<HashAlgorithm, String> {
    match s.to_ascii_lowercase().as_str() {
        "sha256" | "sha-256" => Ok(HashAlgorithm::Sha256),
        "sha512-256" | "sha512_256" | "sha-512/256" => Ok(HashAlgorithm::Sha512_256),
        other => Err(format!("unknown hash algorithm `{other}`")),
    }
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Failure {
            code,
            message: message.into(),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::new(EXIT_IO, e.to_string())
    }
}

impl From<WireError> for Failure {
    fn from(e: WireError) -> Self {
        let code = if e.is_io() { EXIT_IO } else { EXIT_PROTOCOL };
        Failure::new(code, e.to_string())
    }
}

impl From<CardFormatError> for Failure {
    fn from(e: CardFormatError) -> Self {
        Failure::new(EXIT_IO, format!("cannot read card: {e}"))
    }
}

impl From<CardError> for Failure {
    fn from(e: CardError) -> Self {
        Failure::new(EXIT_AUTH, e.to_string())
    }
}

impl From<ServerError> for Failure {
    fn from(e: ServerError) -> Self {
        match e {
            ServerError::InvalidConfig(_) => Failure::new(EXIT_USAGE, e.to_string()),
            _ => Failure::new(EXIT_IO, e.to_string()),
        }
    }
}

impl From<RedteamError> for Failure {
    fn from(e: RedteamError) -> Self {
        match e {
            RedteamError::Wire(w) => w.into(),
            RedteamError::Io(io) => io.into(),
            RedteamError::Unsupported(m) => Failure::new(EXIT_USAGE, m),
            other => Failure::new(EXIT_PROTOCOL, other.to_string()),
        }
    }
}

type CliResult = Result<(), Failure>;

/// Reads one line; hidden echo when stdin is a terminal and `secret` is set.
fn prompt(label: &str, secret: bool) -> Result<Zeroizing<String>, Failure> {
    let stdin = io::stdin();
    if secret && stdin.is_terminal() {
        let value = rpassword::prompt_password(format!("{label}: "))?;
        return Ok(Zeroizing::new(value));
    }
    eprint!("{label}: ");
    io::stderr().flush()?;
    let mut line = Zeroizing::new(String::new());
    if stdin.lock().read_line(&mut line)? == 0 {
        return Err(Failure::new(EXIT_IO, format!("no input for {label}")));
    }
    let trimmed = line.trim_end_matches(['\r', '\n']).len();
    line.truncate(trimmed);
    Ok(line)
}

fn resolve(addr: &str) -> Result<SocketAddr, Failure> {
    addr.to_socket_addrs()
        .map_err(|e| Failure::new(EXIT_USAGE, format!("bad address `{addr}`: {e}")))?
        .next()
        .ok_or_else(|| Failure::new(EXIT_USAGE, format!("address `{addr}` did not resolve")))
}

fn write_private(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let mut options = fs::OpenOptions::new();
    options.write(true).create(true).truncate(true);
    #[cfg(unix)]
    {
        use std::os::unix::fs::OpenOptionsExt;
        options.mode(0o600);
    }
    let mut file = options.open(path)?;
    file.write_all(bytes)?;
    file.sync_all()
}

fn load_card(path: &Path) -> Result<crate::protocol::CardImage, Failure> {
    let bytes = fs::read(path).map_err(|e| Failure::new(EXIT_IO, format!("{}: {e}", path.display())))?;
    Ok(card::load_image(&bytes)?)
}

fn serve(args: ServeArgs) -> CliResult {
    let config = ServerConfig {
        delta_t: args.delta_t,
        mode: args.mode,
        algorithm: args.algorithm,
    };
    config.validate()?;
    let secrets = if args.secrets.exists() {
        server::read_secrets_file(&args.secrets)?
    } else {
        let fresh = AuthServer::init(config, &mut OsRng)?;
        server::write_secrets_file(&args.secrets, fresh.secrets())?;
        eprintln!("generated new secrets in {}", args.secrets.display());
        fresh.secrets().clone()
    };
    let state = Arc::new(AuthServer::with_secrets(config, secrets)?);
    let clock: Arc<dyn Clock> = Arc::new(SystemClock);
    let handle = wire::run_server(
        state,
        clock,
        args.listen.as_str(),
        Some(resolve(&args.trusted_listen)?),
    )?;

    let mut out = io::stdout().lock();
    writeln!(out, "public listener: {}", handle.public_addr())?;
    if let Some(addr) = handle.trusted_addr() {
        writeln!(out, "trusted listener: {addr}")?;
    }
    writeln!(out, "mode: {:?}, delta-t: {} ms", args.mode, args.delta_t)?;
    out.flush()?;
    drop(out);
    handle.wait();
    Ok(())
}

fn register(args: RegisterArgs) -> CliResult {
    if args.id.is_empty() {
        return Err(Failure::new(EXIT_USAGE, "identity must not be empty"));
    }
    let pw = prompt("password", true)?;
    if pw.is_empty() {
        return Err(Failure::new(EXIT_USAGE, "password must not be empty"));
    }
    let mut client = Client::connect(resolve(&args.server)?)?;
    let image = client.register(args.id.as_bytes(), pw.as_bytes())?;
    let bytes = card::save_image(&image)?;
    write_private(&args.out, &bytes)?;
    println!("card for `{}` written to {}", args.id, args.out.display());
    Ok(())
}

fn login(args: LoginArgs) -> CliResult {
    let image = load_card(&args.card)?;
    let id = prompt("identity", false)?;
    let pw = prompt("password", true)?;
    let mut session = CardSession::new(image, args.delta_t);
    if !session.unlock(id.as_bytes(), pw.as_bytes()) {
        println!("REJECTED: card refused the identity or password");
        return Err(Failure::new(EXIT_AUTH, "local card check failed"));
    }
    drop(pw);

    let mut client = Client::connect(resolve(&args.server)?)?;
    if client.server_algorithm_id() != session.image().algorithm.id() {
        return Err(Failure::new(
            EXIT_PROTOCOL,
            format!(
                "server uses hash algorithm 0x{:02x}, card uses 0x{:02x}",
                client.server_algorithm_id(),
                session.image().algorithm.id()
            ),
        ));
    }
    let req = session.start_login(&SystemClock)?;
    match client.login(&req)? {
        LoginReply::Rejected(reason) => {
            println!("REJECTED: server refused the login ({reason:?})");
            Err(Failure::new(EXIT_AUTH, "server rejected the login request"))
        }
        LoginReply::Accepted(proof) => {
            println!("ACCEPTED: server authenticated the user");
            if session.finish_login(&proof, &SystemClock)? {
                println!("server authenticated: yes (mutual authentication complete)");
                Ok(())
            } else {
                println!("server authenticated: NO");
                Err(Failure::new(
                    EXIT_SERVER_AUTH,
                    "server failed to prove its identity",
                ))
            }
        }
    }
}

fn change_password(args: ChangePasswordArgs) -> CliResult {
    let image = load_card(&args.card)?;
    let id = prompt("identity", false)?;
    let old = prompt("current password", true)?;
    let mut session = CardSession::new(image, DEFAULT_DELTA_T_MS);
    if !session.unlock(id.as_bytes(), old.as_bytes()) {
        println!("REJECTED: card refused the identity or password");
        return Err(Failure::new(EXIT_AUTH, "local card check failed"));
    }
    let new = prompt("new password", true)?;
    if new.is_empty() {
        return Err(Failure::new(EXIT_USAGE, "new password must not be empty"));
    }
    session.change_password(new.as_bytes())?;
    write_private(&args.card, &card::save_image(session.image())?)?;
    println!("password changed");
    Ok(())
}

fn attack(args: AttackArgs) -> CliResult {
    let mut kinds = ScenarioKind::parse_selection(&args.scenario).map_err(|e| Failure::new(EXIT_USAGE, e))?;
    let dictionary = match &args.dictionary {
        Some(path) => redteam::parse_dictionary(&fs::read_to_string(path)?),
        None => redteam::parse_dictionary(redteam::DEFAULT_DICTIONARY),
    };

    let reports = match &args.server {
        Some(addr) => {
            let card_path = args.card.as_ref().expect("clap enforces --card");
            let image = load_card(card_path)?;
            let id = prompt("victim identity", false)?;
            let pw = prompt("victim password", true)?;
            let victim = Victim::new(
                image,
                Credentials::new(id.as_bytes().to_vec(), pw.as_bytes().to_vec()),
            );
            if kinds.len() > 1 {
                kinds.retain(|k| *k != ScenarioKind::StolenVerifier);
            }
            redteam::run_live(
                &kinds,
                resolve(addr)?,
                args.delta_t,
                &victim,
                &dictionary,
                args.seed,
            )?
        }
        None => redteam::run_all(&RunConfig {
            mode: args.mode,
            seed: args.seed,
            delta_t: args.delta_t,
            scenarios: Some(kinds),
            dictionary,
            ..RunConfig::default()
        })?,
    };

    print!("{}", redteam::summary_table(&reports));
    for report in &reports {
        for note in &report.notes {
            println!("  {}: {note}", report.scenario);
        }
    }
    if let Some(path) = &args.report {
        redteam::write_report(fs::File::create(path)?, &reports)?;
    }
    if reports.iter().all(|r| r.control_ok) {
        Ok(())
    } else {
        Err(Failure::new(
            EXIT_AUTH,
            "a control arm failed; results are not meaningful",
        ))
    }
}

pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Serve(a) => serve(a),
        Command::Register(a) => register(a),
        Command::Login(a) => login(a),
        Command::ChangePassword(a) => change_password(a),
        Command::Attack(a) => attack(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

//! Blocking TCP service and client.
//!
//! Every connection opens with a HELLO exchange. Requests on one connection
//! are answered strictly in order, so clients may pipeline. Registration is
//! only served on the trusted listener, which must be bound to loopback.

use std::io::{self, BufReader};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use crate::clock::Clock;
use crate::protocol::{CardImage, LoginRequest, ServerProof};
use crate::server::AuthServer;

use super::codec::{encode, read_message, write_message, Message, RejectReason, PROTOCOL_VERSION};
use super::WireError;

const IDLE_TIMEOUT: Duration = Duration::from_secs(30);

pub struct ServiceHandle {
    public_addr: SocketAddr,
    trusted_addr: Option<SocketAddr>,
    stop: Arc<AtomicBool>,
    acceptors: Vec<JoinHandle<()>>,
}

impl ServiceHandle {
    pub fn public_addr(&self) -> SocketAddr {
        self.public_addr
    }

    pub fn trusted_addr(&self) -> Option<SocketAddr> {
        self.trusted_addr
    }

    /// Stops accepting new connections and joins the accept loops.
    /// Connections already open finish on their own.
    pub fn shutdown(self) {
        self.stop.store(true, Ordering::SeqCst);
        for addr in std::iter::once(self.public_addr).chain(self.trusted_addr) {
            // Wake the blocking accept.
            let _ = TcpStream::connect_timeout(&addr, Duration::from_secs(1));
        }
        for handle in self.acceptors {
            let _ = handle.join();
        }
    }

    /// Blocks until the accept loops exit.
    pub fn wait(self) {
        for handle in self.acceptors {
            let _ = handle.join();
        }
    }
}

fn bind(addr: impl ToSocketAddrs) -> Result<TcpListener, WireError> {
    Ok(TcpListener::bind(addr)?)
}

pub fn run_server(
    server: Arc<AuthServer>,
    clock: Arc<dyn Clock>,
    public: impl ToSocketAddrs,
    trusted: Option<SocketAddr>,
) -> Result<ServiceHandle, WireError> {
    let public_listener = bind(public)?;
    let trusted_listener = match trusted {
        Some(addr) => {
            if !addr.ip().is_loopback() {
                return Err(WireError::Protocol(format!(
                    "trusted listener must be bound to loopback, got {addr}"
                )));
            }
            Some(bind(addr)?)
        }
        None => None,
    };

    let stop = Arc::new(AtomicBool::new(false));
    let public_addr = public_listener.local_addr()?;
    let trusted_addr = trusted_listener.as_ref().map(|l| l.local_addr()).transpose()?;

    let mut acceptors = vec![spawn_acceptor(public_listener, false, &server, &clock, &stop)];
    if let Some(listener) = trusted_listener {
        acceptors.push(spawn_acceptor(listener, true, &server, &clock, &stop));
    }
    Ok(ServiceHandle {
        public_addr,
        trusted_addr,
        stop,
        acceptors,
    })
}

fn spawn_acceptor(
    listener: TcpListener,
    trusted: bool,
    server: &Arc<AuthServer>,
    clock: &Arc<dyn Clock>,
    stop: &Arc<AtomicBool>,
) -> JoinHandle<()> {
    let server = server.clone();
    let clock = clock.clone();
    let stop = stop.clone();
    thread::spawn(move || {
        for stream in listener.incoming() {
            if stop.load(Ordering::SeqCst) {
                break;
            }
            let Ok(stream) = stream else { continue };
            let server = server.clone();
            let clock = clock.clone();
            thread::spawn(move || {
                let _ = serve_connection(&stream, &server, clock.as_ref(), trusted);
                let _ = stream.shutdown(Shutdown::Both);
            });
        }
    })
}

fn serve_connection(
    stream: &TcpStream,
    server: &AuthServer,
    clock: &dyn Clock,
    trusted: bool,
) -> Result<(), WireError> {
    stream.set_read_timeout(Some(IDLE_TIMEOUT))?;
    stream.set_nodelay(true)?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = stream;

    match read_message(&mut reader)? {
        None => return Ok(()),
        Some(Message::Hello { version, .. }) if version == PROTOCOL_VERSION => {}
        Some(other) => {
            return Err(WireError::Protocol(format!(
                "expected HELLO, got {}",
                other.name()
            )))
        }
    }
    write_message(
        &mut writer,
        &Message::Hello {
            version: PROTOCOL_VERSION,
            algorithm_id: server.algorithm().id(),
        },
    )?;

    while let Some(msg) = read_message(&mut reader)? {
        let response = match msg {
            Message::LoginRequest(req) => Message::for_outcome(&server.handle_login(&req, clock)),
            Message::RegisterRequest { id, pw } if trusted => {
                let image = server
                    .handle_registration(&pw, &id)
                    .map_err(|e| WireError::Protocol(e.to_string()))?;
                Message::RegisterResponse(image)
            }
            other => {
                return Err(WireError::Protocol(format!(
                    "{} not allowed on this listener",
                    other.name()
                )))
            }
        };
        write_message(&mut writer, &response)?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LoginReply {
    Accepted(ServerProof),
    Rejected(RejectReason),
}

pub struct Client {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
    server_algorithm_id: u8,
    capture: Option<Vec<u8>>,
}

fn closed_or_io(e: WireError) -> WireError {
    match e {
        WireError::Io(ref io)
            if matches!(
                io.kind(),
                io::ErrorKind::ConnectionReset | io::ErrorKind::ConnectionAborted | io::ErrorKind::BrokenPipe
            ) =>
        {
            WireError::Closed
        }
        WireError::Truncated => WireError::Closed,
        other => other,
    }
}

impl Client {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self, WireError> {
        Self::connect_inner(addr, None)
    }

    /// Like [`Client::connect`], additionally recording every frame sent and received.
    pub fn connect_capturing(addr: impl ToSocketAddrs) -> Result<Self, WireError> {
        Self::connect_inner(addr, Some(Vec::new()))
    }

    fn connect_inner(addr: impl ToSocketAddrs, capture: Option<Vec<u8>>) -> Result<Self, WireError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        stream.set_read_timeout(Some(IDLE_TIMEOUT))?;
        let mut client = Client {
            reader: BufReader::new(stream.try_clone()?),
            writer: stream,
            server_algorithm_id: 0,
            capture,
        };
        client.send(&Message::Hello {
            version: PROTOCOL_VERSION,
            algorithm_id: crate::primitives::HashAlgorithm::default().id(),
        })?;
        match client.recv()? {
            Message::Hello {
                version,
                algorithm_id,
            } if version == PROTOCOL_VERSION => {
                client.server_algorithm_id = algorithm_id;
                Ok(client)
            }
            Message::Hello { version, .. } => Err(WireError::Protocol(format!(
                "server speaks protocol version {version}"
            ))),
            other => Err(WireError::Protocol(format!(
                "expected HELLO, got {}",
                other.name()
            ))),
        }
    }

    /// The hash algorithm id announced in the server's HELLO.
    pub fn server_algorithm_id(&self) -> u8 {
        self.server_algorithm_id
    }

    pub fn send(&mut self, msg: &Message) -> Result<(), WireError> {
        if let Some(capture) = self.capture.as_mut() {
            capture.extend(encode(msg)?);
        }
        write_message(&mut self.writer, msg).map_err(closed_or_io)
    }

    pub fn recv(&mut self) -> Result<Message, WireError> {
        let msg = read_message(&mut self.reader)
            .map_err(closed_or_io)?
            .ok_or(WireError::Closed)?;
        if let Some(capture) = self.capture.as_mut() {
            capture.extend(encode(&msg)?);
        }
        Ok(msg)
    }

    pub fn login(&mut self, req: &LoginRequest) -> Result<LoginReply, WireError> {
        self.send(&Message::LoginRequest(*req))?;
        match self.recv()? {
            Message::LoginAccept(proof) => Ok(LoginReply::Accepted(proof)),
            Message::LoginReject(reason) => Ok(LoginReply::Rejected(reason)),
            other => Err(WireError::Protocol(format!(
                "unexpected {} in reply to login",
                other.name()
            ))),
        }
    }

    pub fn register(&mut self, id: &[u8], pw: &[u8]) -> Result<CardImage, WireError> {
        self.send(&Message::RegisterRequest {
            id: id.to_vec(),
            pw: pw.to_vec(),
        })?;
        match self.recv()? {
            Message::RegisterResponse(image) => Ok(image),
            other => Err(WireError::Protocol(format!(
                "unexpected {} in reply to registration",
                other.name()
            ))),
        }
    }

    pub fn captured(&self) -> &[u8] {
        self.capture.as_deref().unwrap_or(&[])
    }
}

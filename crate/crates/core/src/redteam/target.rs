//! What a scenario attacks: an in-process server on a manual clock, or a
//! live server reached over the wire.

use std::net::SocketAddr;
use std::thread;
use std::time::Duration;

use crate::clock::{Clock, ManualClock, SystemClock};
use crate::primitives::Timestamp;
use crate::protocol::{LoginRequest, Verdict};
use crate::server::AuthServer;
use crate::wire::{Client, LoginReply, Message};

use super::RedteamError;

pub trait Target {
    /// The clock the victim's card and the attacker share with the server.
    fn clock(&self) -> &dyn Clock;

    fn delta_t(&self) -> u64;

    /// Lets `millis` pass before the next submission.
    fn wait(&mut self, millis: u64);

    /// Submits a login request. The exact verdict is only known in-process.
    fn submit(&mut self, req: &LoginRequest) -> Result<(Message, Option<Verdict>), RedteamError>;

    /// The server instance, when it lives in this process.
    fn server(&self) -> Option<&AuthServer> {
        None
    }

    fn now(&self) -> Timestamp {
        self.clock().now()
    }
}

pub struct InProcessTarget {
    server: AuthServer,
    clock: ManualClock,
}

impl InProcessTarget {
    pub fn new(server: AuthServer, clock: ManualClock) -> Self {
        InProcessTarget { server, clock }
    }

    pub fn manual_clock(&self) -> &ManualClock {
        &self.clock
    }
}

impl Target for InProcessTarget {
    fn clock(&self) -> &dyn Clock {
        &self.clock
    }

    fn delta_t(&self) -> u64 {
        self.server.config().delta_t
    }

    fn wait(&mut self, millis: u64) {
        self.clock.advance(millis);
    }

    fn submit(&mut self, req: &LoginRequest) -> Result<(Message, Option<Verdict>), RedteamError> {
        let outcome = self.server.handle_login(req, &self.clock);
        Ok((Message::for_outcome(&outcome), Some(outcome.verdict)))
    }

    fn server(&self) -> Option<&AuthServer> {
        Some(&self.server)
    }
}

/// A running server over TCP. Waiting really sleeps, so `delta_t` must
/// match the server's configuration for the timing scenarios to mean much.
pub struct LiveTarget {
    client: Client,
    delta_t: u64,
}

impl LiveTarget {
    pub fn connect(addr: SocketAddr, delta_t: u64) -> Result<Self, RedteamError> {
        Ok(LiveTarget {
            client: Client::connect(addr)?,
            delta_t,
        })
    }
}

impl Target for LiveTarget {
    fn clock(&self) -> &dyn Clock {
        &SystemClock
    }

    fn delta_t(&self) -> u64 {
        self.delta_t
    }

    fn wait(&mut self, millis: u64) {
        thread::sleep(Duration::from_millis(millis));
    }

    fn submit(&mut self, req: &LoginRequest) -> Result<(Message, Option<Verdict>), RedteamError> {
        let reply = match self.client.login(req)? {
            LoginReply::Accepted(proof) => Message::LoginAccept(proof),
            LoginReply::Rejected(reason) => Message::LoginReject(reason),
        };
        Ok((reply, None))
    }
}

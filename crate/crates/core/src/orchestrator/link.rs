//! Orchestrator-side connection to a device daemon.

use std::collections::VecDeque;
use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::{Duration, Instant};

use log::warn;
use serde_json::{Map, Value};
use thiserror::Error;

use crate::daemon::{ClockMode, DaemonCore};
use crate::protocol::{Body, Command, DaemonEvent, Decoded, FrameDecoder, Hello, Nack, Role, StatusReport, Telemetry, WireMessage};

pub type Reply = Result<Map<String, Value>, Nack>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinkError {
    #[error("daemon connection lost")]
    Disconnected,
    #[error("no reply to {0} in time")]
    Timeout(String),
    #[error("protocol error: {0}")]
    Protocol(String),
}

/// Unsolicited traffic from the daemon.
#[derive(Debug, Clone, PartialEq)]
pub enum Inbound {
    Telemetry { seq: u64, telemetry: Telemetry },
    Event(DaemonEvent),
    Status(StatusReport),
}

pub trait DaemonLink {
    /// Payload of the daemon's Hello Ack.
    fn info(&self) -> &Map<String, Value>;
    /// Sends one command and waits for its Ack or Nack.
    fn request(&mut self, command: Command) -> Result<Reply, LinkError>;
    /// Lets `seconds` of testbed time pass.
    fn wait(&mut self, seconds: f64) -> Result<(), LinkError>;
    /// Everything received since the last call, in arrival order.
    fn drain(&mut self) -> Vec<Inbound>;
    /// Re-establishes a lost connection. In-process links never lose theirs.
    fn reconnect(&mut self) -> Result<(), LinkError> {
        Ok(())
    }
}

fn inbound(msg: WireMessage) -> Option<Inbound> {
    match msg.body {
        Body::Telemetry(telemetry) => Some(Inbound::Telemetry { seq: msg.seq, telemetry }),
        Body::Event(e) => Some(Inbound::Event(e)),
        Body::Status(s) => Some(Inbound::Status(s)),
        _ => None,
    }
}

/// Drives a [`DaemonCore`] directly, without sockets. Time advances only in
/// [`DaemonLink::wait`]; `pace` optionally sleeps `seconds / pace` of wall time.
pub struct InProcessLink {
    core: DaemonCore,
    info: Map<String, Value>,
    inbox: VecDeque<Inbound>,
    seq: u64,
    pace: Option<f64>,
}

impl InProcessLink {
    pub fn new(core: DaemonCore) -> Self {
        let info = core.hello_payload();
        InProcessLink { core, info, inbox: VecDeque::new(), seq: 0, pace: None }
    }

    pub fn with_pace(mut self, factor: f64) -> Self {
        self.pace = Some(factor);
        self
    }

    pub fn core(&self) -> &DaemonCore {
        &self.core
    }

    pub fn core_mut(&mut self) -> &mut DaemonCore {
        &mut self.core
    }

    pub fn into_core(self) -> DaemonCore {
        self.core
    }

    fn absorb(&mut self, out: Vec<WireMessage>) {
        self.inbox.extend(out.into_iter().filter_map(inbound));
    }
}

impl DaemonLink for InProcessLink {
    fn info(&self) -> &Map<String, Value> {
        &self.info
    }

    fn request(&mut self, command: Command) -> Result<Reply, LinkError> {
        self.seq += 1;
        let (reply, out) = self.core.execute(self.seq, command);
        self.absorb(out);
        match reply.body {
            Body::Ack(m) => Ok(Ok(m)),
            Body::Nack(n) => Ok(Err(n)),
            other => Err(LinkError::Protocol(format!("unexpected reply {:?}", other.msg_type()))),
        }
    }

    fn wait(&mut self, seconds: f64) -> Result<(), LinkError> {
        let mut out = Vec::new();
        let result = self.core.advance(seconds, &mut out);
        self.absorb(out);
        if let Err(e) = result {
            warn!("backend step failed: {e}");
        }
        if let Some(k) = self.pace {
            thread::sleep(Duration::from_secs_f64(seconds / k));
        }
        Ok(())
    }

    fn drain(&mut self) -> Vec<Inbound> {
        self.inbox.drain(..).collect()
    }
}

/// Control connection to a daemon over TCP.
pub struct TcpLink {
    stream: TcpStream,
    rx: Receiver<Decoded<WireMessage>>,
    info: Map<String, Value>,
    clock: ClockMode,
    inbox: VecDeque<Inbound>,
    seq: u64,
    timeout: Duration,
    closed: bool,
    peer: SocketAddr,
    client: String,
    role: Role,
}

impl TcpLink {
    /// Connects and performs the Hello handshake as the control client.
    pub fn connect(addr: impl ToSocketAddrs, client: &str) -> Result<Self, LinkError> {
        Self::connect_as(addr, client, Role::Control)
    }

    pub fn connect_as(addr: impl ToSocketAddrs, client: &str, role: Role) -> Result<Self, LinkError> {
        let stream = TcpStream::connect(addr).map_err(|_| LinkError::Disconnected)?;
        let peer = stream.peer_addr().map_err(|e| LinkError::Protocol(e.to_string()))?;
        stream.set_nodelay(true).map_err(|e| LinkError::Protocol(e.to_string()))?;
        let mut read_half = stream.try_clone().map_err(|e| LinkError::Protocol(e.to_string()))?;
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            let mut decoder = FrameDecoder::new();
            let mut buf = vec![0u8; 64 * 1024];
            loop {
                match read_half.read(&mut buf) {
                    Ok(0) | Err(_) => break,
                    Ok(n) => {
                        decoder.push(&buf[..n]);
                        while let Some(d) = decoder.next_message() {
                            if tx.send(d).is_err() {
                                return;
                            }
                        }
                    }
                }
            }
        });
        let mut link = TcpLink {
            stream,
            rx,
            info: Map::new(),
            clock: ClockMode::RealTime,
            inbox: VecDeque::new(),
            seq: 0,
            timeout: Duration::from_secs(10),
            closed: false,
            peer,
            client: client.to_string(),
            role,
        };
        let hello = Body::Hello(Hello { role, client: client.to_string() });
        match link.round_trip(hello, "Hello")? {
            Ok(info) => {
                if let Some(c) = info.get("clock") {
                    link.clock = serde_json::from_value(c.clone()).map_err(|e| LinkError::Protocol(e.to_string()))?;
                }
                link.info = info;
                Ok(link)
            }
            Err(nack) => Err(LinkError::Protocol(format!("hello rejected: {:?} {}", nack.code, nack.message))),
        }
    }

    pub fn set_timeout(&mut self, timeout: Duration) {
        self.timeout = timeout;
    }

    pub fn clock(&self) -> ClockMode {
        self.clock
    }

    fn send(&mut self, msg: &WireMessage) -> Result<(), LinkError> {
        if self.closed {
            return Err(LinkError::Disconnected);
        }
        self.stream.write_all(&msg.encode()).map_err(|_| {
            self.closed = true;
            LinkError::Disconnected
        })
    }

    fn round_trip(&mut self, body: Body, what: &str) -> Result<Reply, LinkError> {
        self.seq += 1;
        let seq = self.seq;
        self.send(&WireMessage::new(seq, body))?;
        let deadline = Instant::now() + self.timeout;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            match self.rx.recv_timeout(left) {
                Ok(Decoded::Message(m)) => match m.body {
                    Body::Ack(a) if m.seq == seq => return Ok(Ok(a)),
                    Body::Nack(n) if m.seq == seq => return Ok(Err(n)),
                    Body::Ack(_) | Body::Nack(_) => warn!("dropping stale reply seq {}", m.seq),
                    _ => self.inbox.extend(inbound(m)),
                },
                Ok(Decoded::Error(e)) => warn!("undecodable frame from daemon: {e}"),
                Err(RecvTimeoutError::Timeout) => return Err(LinkError::Timeout(what.to_string())),
                Err(RecvTimeoutError::Disconnected) => {
                    self.closed = true;
                    return Err(LinkError::Disconnected);
                }
            }
        }
    }

    fn pump(&mut self) -> Result<(), LinkError> {
        loop {
            match self.rx.try_recv() {
                Ok(Decoded::Message(m)) => self.inbox.extend(inbound(m)),
                Ok(Decoded::Error(e)) => warn!("undecodable frame from daemon: {e}"),
                Err(mpsc::TryRecvError::Empty) => return Ok(()),
                Err(mpsc::TryRecvError::Disconnected) => {
                    self.closed = true;
                    return Err(LinkError::Disconnected);
                }
            }
        }
    }

    pub fn close(&mut self) -> io::Result<()> {
        self.closed = true;
        self.stream.shutdown(Shutdown::Both)
    }
}

impl Drop for TcpLink {
    fn drop(&mut self) {
        let _ = self.stream.shutdown(Shutdown::Both);
    }
}

impl DaemonLink for TcpLink {
    fn info(&self) -> &Map<String, Value> {
        &self.info
    }

    fn request(&mut self, command: Command) -> Result<Reply, LinkError> {
        let name = command.name();
        self.round_trip(Body::Command(command), name)
    }

    fn wait(&mut self, seconds: f64) -> Result<(), LinkError> {
        match self.clock.rate() {
            None => match self.request(Command::Advance { seconds })? {
                Ok(_) => Ok(()),
                Err(n) => Err(LinkError::Protocol(format!("Advance rejected: {}", n.message))),
            },
            Some(rate) => {
                thread::sleep(Duration::from_secs_f64(seconds / rate));
                self.pump()
            }
        }
    }

    fn drain(&mut self) -> Vec<Inbound> {
        let _ = self.pump();
        self.inbox.drain(..).collect()
    }

    fn reconnect(&mut self) -> Result<(), LinkError> {
        if !self.closed {
            return Ok(());
        }
        let mut fresh = TcpLink::connect_as(self.peer, &self.client, self.role)?;
        fresh.timeout = self.timeout;
        std::mem::swap(self, &mut fresh);
        Ok(())
    }
}

//! TCP front end for [`DaemonCore`].
//!
//! One executor thread owns the core. Every connection gets a reader thread
//! (decodes frames, forwards them to the executor) and a writer thread (drains
//! an outbound queue), so a slow subscriber never blocks the control loop.

use std::collections::BTreeMap;
use std::io::{self, ErrorKind, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, info, warn};
use thiserror::Error;

use super::{open_backend, BackendError, ConfigError, DaemonConfig, DaemonCore};
use crate::protocol::{Body, Decoded, FrameDecoder, MsgType, Nack, NackCode, Role, WireMessage};

/// How long a reader waits on a partial frame before declaring it malformed.
pub const STALL_TIMEOUT: Duration = Duration::from_millis(500);
const POLL: Duration = Duration::from_millis(5);

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: String, source: io::Error },
    #[error("backend initialisation failed: {0}")]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

impl ServeError {
    /// Process exit code for the daemon binary.
    pub fn exit_code(&self) -> i32 {
        match self {
            ServeError::Bind { .. } => 2,
            ServeError::Backend(_) => 3,
            ServeError::Config(_) => 1,
        }
    }
}

enum ToExecutor {
    Open { id: u64, tx: Sender<Vec<u8>> },
    Frame { id: u64, frame: Decoded<WireMessage> },
    Closed { id: u64 },
}

struct Conn {
    role: Option<Role>,
    tx: Sender<Vec<u8>>,
}

/// A running daemon. Dropping it shuts the daemon down.
pub struct DaemonServer {
    addr: SocketAddr,
    shutdown: Arc<AtomicBool>,
    connections: Arc<AtomicUsize>,
    threads: Vec<JoinHandle<()>>,
}

impl DaemonServer {
    /// Opens the configured backend and starts serving.
    pub fn start(config: DaemonConfig) -> Result<Self, ServeError> {
        config.validate()?;
        let listener = TcpListener::bind(&config.listen_address)
            .map_err(|source| ServeError::Bind { addr: config.listen_address.clone(), source })?;
        let backend = open_backend(&config)?;
        let core = DaemonCore::new(config, backend)?;
        Self::serve(listener, core)
    }

    /// Serves an existing core on an already bound listener.
    pub fn serve(listener: TcpListener, core: DaemonCore) -> Result<Self, ServeError> {
        let addr = listener.local_addr().map_err(|source| ServeError::Bind { addr: "?".into(), source })?;
        listener
            .set_nonblocking(true)
            .map_err(|source| ServeError::Bind { addr: addr.to_string(), source })?;
        let shutdown = Arc::new(AtomicBool::new(false));
        let connections = Arc::new(AtomicUsize::new(0));
        let (tx, rx) = mpsc::channel();

        let exec = {
            let shutdown = shutdown.clone();
            thread::Builder::new()
                .name("daemon-exec".into())
                .spawn(move || Executor::new(core).run(rx, &shutdown))
                .expect("spawn executor")
        };
        let accept = {
            let shutdown = shutdown.clone();
            let connections = connections.clone();
            thread::Builder::new()
                .name("daemon-accept".into())
                .spawn(move || accept_loop(listener, tx, &shutdown, &connections))
                .expect("spawn acceptor")
        };
        info!("daemon listening on {addr}");
        Ok(DaemonServer { addr, shutdown, connections, threads: vec![exec, accept] })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Number of client connections whose threads are still alive.
    pub fn connection_count(&self) -> usize {
        self.connections.load(Ordering::SeqCst)
    }

    pub fn shutdown_handle(&self) -> Arc<AtomicBool> {
        self.shutdown.clone()
    }

    /// Blocks until some other holder of the shutdown flag sets it.
    pub fn wait(mut self) {
        while !self.shutdown.load(Ordering::SeqCst) {
            thread::sleep(Duration::from_millis(50));
        }
        self.stop();
    }

    pub fn stop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
        // Connection threads notice the flag within one read timeout.
        let deadline = Instant::now() + Duration::from_secs(2);
        while self.connection_count() > 0 && Instant::now() < deadline {
            thread::sleep(POLL);
        }
    }
}

impl Drop for DaemonServer {
    fn drop(&mut self) {
        self.stop();
    }
}

fn accept_loop(listener: TcpListener, tx: Sender<ToExecutor>, shutdown: &Arc<AtomicBool>, count: &Arc<AtomicUsize>) {
    let mut next_id = 0u64;
    while !shutdown.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                next_id += 1;
                debug!("connection {next_id} from {peer}");
                if let Err(e) = spawn_connection(next_id, stream, tx.clone(), shutdown.clone(), count.clone()) {
                    warn!("dropping connection {next_id}: {e}");
                }
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => thread::sleep(POLL),
            Err(e) => {
                warn!("accept failed: {e}");
                thread::sleep(POLL);
            }
        }
    }
}

fn spawn_connection(
    id: u64,
    stream: TcpStream,
    exec: Sender<ToExecutor>,
    shutdown: Arc<AtomicBool>,
    count: Arc<AtomicUsize>,
) -> io::Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(Duration::from_millis(50)))?;
    let mut write_half = stream.try_clone()?;
    let (out_tx, out_rx) = mpsc::channel::<Vec<u8>>();
    if exec.send(ToExecutor::Open { id, tx: out_tx }).is_err() {
        return Ok(());
    }
    count.fetch_add(1, Ordering::SeqCst);

    let writer = thread::spawn(move || {
        for bytes in out_rx {
            if write_half.write_all(&bytes).is_err() {
                break;
            }
        }
        let _ = write_half.shutdown(Shutdown::Both);
    });

    thread::spawn(move || {
        read_loop(id, stream, &exec, &shutdown);
        let _ = exec.send(ToExecutor::Closed { id });
        let _ = writer.join();
        count.fetch_sub(1, Ordering::SeqCst);
        debug!("connection {id} closed");
    });
    Ok(())
}

fn read_loop(id: u64, mut stream: TcpStream, exec: &Sender<ToExecutor>, shutdown: &AtomicBool) {
    let mut decoder = FrameDecoder::new();
    let mut buf = vec![0u8; 64 * 1024];
    let mut last_progress = Instant::now();
    loop {
        if shutdown.load(Ordering::SeqCst) {
            break;
        }
        match stream.read(&mut buf) {
            Ok(0) => break,
            Ok(n) => {
                decoder.push(&buf[..n]);
                last_progress = Instant::now();
                while let Some(frame) = decoder.next_message() {
                    if exec.send(ToExecutor::Frame { id, frame }).is_err() {
                        return;
                    }
                }
            }
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut | ErrorKind::Interrupted) => {
                if decoder.buffered() > 0 && last_progress.elapsed() >= STALL_TIMEOUT {
                    if let Some(err) = decoder.stall() {
                        let _ = exec.send(ToExecutor::Frame { id, frame: Decoded::Error(err) });
                    }
                    last_progress = Instant::now();
                }
            }
            Err(_) => break,
        }
    }
    let _ = stream.shutdown(Shutdown::Both);
}

struct Executor {
    core: DaemonCore,
    conns: BTreeMap<u64, Conn>,
    control: Option<u64>,
}

impl Executor {
    fn new(core: DaemonCore) -> Self {
        Executor { core, conns: BTreeMap::new(), control: None }
    }

    fn run(mut self, rx: Receiver<ToExecutor>, shutdown: &AtomicBool) {
        let rate = self.core.config().clock.rate();
        let mut last = Instant::now();
        while !shutdown.load(Ordering::SeqCst) {
            match rx.recv_timeout(POLL) {
                Ok(msg) => self.on_message(msg),
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => break,
            }
            if let Some(rate) = rate {
                let now = Instant::now();
                let dt = (now - last).as_secs_f64() * rate;
                last = now;
                let mut out = Vec::new();
                if let Err(e) = self.core.advance(dt, &mut out) {
                    warn!("backend step failed: {e}");
                }
                self.broadcast(out);
            }
        }
        self.core.control_lost();
        // Dropping the connection senders ends every writer thread.
        self.conns.clear();
    }

    fn send(&self, id: u64, msg: &WireMessage) {
        if let Some(c) = self.conns.get(&id) {
            let _ = c.tx.send(msg.encode());
        }
    }

    /// Telemetry and events go to every connection that has said Hello.
    fn broadcast(&self, out: Vec<WireMessage>) {
        for msg in out {
            let bytes = msg.encode();
            for c in self.conns.values().filter(|c| c.role.is_some()) {
                let _ = c.tx.send(bytes.clone());
            }
        }
    }

    fn on_message(&mut self, msg: ToExecutor) {
        match msg {
            ToExecutor::Open { id, tx } => {
                self.conns.insert(id, Conn { role: None, tx });
            }
            ToExecutor::Closed { id } => {
                self.conns.remove(&id);
                if self.control == Some(id) {
                    info!("control connection lost; releasing actuators");
                    self.control = None;
                    self.core.control_lost();
                }
            }
            ToExecutor::Frame { id, frame: Decoded::Error(e) } => {
                self.send(id, &e.to_nack());
            }
            ToExecutor::Frame { id, frame: Decoded::Message(m) } => self.on_wire(id, m),
        }
    }

    fn on_wire(&mut self, id: u64, msg: WireMessage) {
        if let Body::Hello(hello) = &msg.body {
            let reply = match hello.role {
                Role::Control if self.control.is_some_and(|c| c != id) => {
                    WireMessage::nack(msg.seq, Nack::new(NackCode::Busy, "a control connection is already open"))
                }
                role => {
                    if role == Role::Control {
                        self.control = Some(id);
                    } else if self.control == Some(id) {
                        self.control = None;
                    }
                    if let Some(c) = self.conns.get_mut(&id) {
                        c.role = Some(role);
                    }
                    self.core.hello(msg.seq, hello)
                }
            };
            self.send(id, &reply);
            if reply.body.msg_type() == MsgType::Ack {
                let status = WireMessage::new(0, Body::Status(self.core.status()));
                self.send(id, &status);
            }
            return;
        }
        let role = self.conns.get(&id).and_then(|c| c.role);
        let (reply, out) = self.core.handle_message(role, msg);
        // Frames produced by a lockstep Advance precede its Ack.
        self.broadcast(out);
        self.send(id, &reply);
    }
}

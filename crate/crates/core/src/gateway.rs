//! Monitoring and control endpoint of the orchestrator.
//!
//! Uses the daemon's length-prefixed framing with its own message set. The
//! envelope is the same `{msg_type, seq, payload}` shape. Replies echo the
//! request seq; pushes carry a hub-wide counter so every subscriber sees the
//! same numbering.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, ErrorKind, Read, Seek, SeekFrom, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, warn};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::dataset::{CampaignManifest, ManifestEntry, FSR_CSV, MANIFEST_JSON, MANIPULATOR_CSV, META_JSON, PARTIAL_SUFFIX, TESTBED_CSV};
use crate::orchestrator::manipulator::JointFeedback;
use crate::orchestrator::{Control, ControlReply, ControlRequest, Monitor, StatusSnapshot};
use crate::protocol::{encode_frame, DecodeError, FrameDecoder, Telemetry};

/// Live frames and feedback are forwarded at most this often.
pub const MAX_PUSH_RATE: f64 = 20.0;
/// Largest dataset chunk served in one reply.
pub const MAX_CHUNK: usize = 256 * 1024;
const CONTROL_TIMEOUT: Duration = Duration::from_secs(5);
const POLL: Duration = Duration::from_millis(5);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStream {
    Meta,
    Testbed,
    Fsr,
    Manipulator,
}

impl TrialStream {
    pub fn file_name(self) -> &'static str {
        match self {
            TrialStream::Meta => META_JSON,
            TrialStream::Testbed => TESTBED_CSV,
            TrialStream::Fsr => FSR_CSV,
            TrialStream::Manipulator => MANIPULATOR_CSV,
        }
    }
}

/// Every gateway message. The first group is sent by consoles, the rest by
/// the gateway.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "msg_type", content = "payload")]
pub enum GatewayBody {
    Subscribe {
        #[serde(default)]
        client: String,
    },
    Control(Control),
    StatusQuery,
    ListTrials,
    FetchTrial {
        trial_id: String,
        stream: TrialStream,
        #[serde(default)]
        offset: u64,
        #[serde(default)]
        limit: Option<usize>,
    },

    Ack(Map<String, Value>),
    Nack {
        reason: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max: Option<f64>,
    },
    Status(StatusSnapshot),
    Frame {
        daemon_seq: u64,
        telemetry: Telemetry,
    },
    Feedback(JointFeedback),
    Trials {
        trials: Vec<ManifestEntry>,
    },
    Chunk {
        trial_id: String,
        stream: TrialStream,
        offset: u64,
        total: u64,
        /// Served from a `.partial` file: the trial never completed.
        partial: bool,
        text: String,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatewayMessage {
    pub seq: u64,
    pub body: GatewayBody,
}

impl GatewayMessage {
    pub fn new(seq: u64, body: GatewayBody) -> Self {
        GatewayMessage { seq, body }
    }

    pub fn nack(seq: u64, reason: impl Into<String>) -> Self {
        GatewayMessage::new(seq, GatewayBody::Nack { reason: reason.into(), max: None })
    }

    pub fn to_json(&self) -> String {
        let mut v = serde_json::to_value(&self.body).expect("gateway payloads serialize");
        if let Value::Object(m) = &mut v {
            m.insert("seq".into(), Value::from(self.seq));
            if !m.contains_key("payload") {
                m.insert("payload".into(), Value::Null);
            }
        }
        v.to_string()
    }

    pub fn encode(&self) -> Vec<u8> {
        encode_frame(self.to_json().as_bytes())
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut v: Value = serde_json::from_slice(bytes).map_err(|e| DecodeError::Malformed { seq: None, reason: e.to_string() })?;
        let seq = v.get("seq").and_then(Value::as_u64);
        let malformed = |reason: String| DecodeError::Malformed { seq, reason };
        let Value::Object(m) = &mut v else { return Err(malformed("envelope must be an object".into())) };
        let seq = m.remove("seq").and_then(|s| s.as_u64()).ok_or_else(|| malformed("missing seq".into()))?;
        if m.get("payload") == Some(&Value::Null) {
            m.remove("payload");
        }
        let body = serde_json::from_value(v).map_err(|e| malformed(e.to_string()))?;
        Ok(GatewayMessage { seq, body })
    }
}

/// Pulls gateway messages out of a byte stream.
#[derive(Debug, Default)]
pub struct GatewayDecoder {
    inner: FrameDecoder,
}

impl GatewayDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.inner.push(bytes);
    }

    pub fn next(&mut self) -> Option<Result<GatewayMessage, DecodeError>> {
        self.inner.next_raw().map(|r| r.and_then(|raw| GatewayMessage::from_json(&raw)))
    }
}

enum HubInput {
    Status(StatusSnapshot),
    Frame(u64, Telemetry),
    Feedback(JointFeedback),
    Join { id: u64, seq: u64, tx: Sender<Vec<u8>> },
    Leave { id: u64 },
    Query { seq: u64, tx: Sender<Vec<u8>> },
}

/// Executor-side half of the gateway. Decimates frames and feedback, drops
/// repeated status snapshots, and forwards the rest to the hub thread.
pub struct HubMonitor {
    tx: Sender<HubInput>,
    period: f64,
    last_frame: Option<f64>,
    last_feedback: Option<f64>,
    last_status: Option<StatusSnapshot>,
}

impl HubMonitor {
    fn due(last: &mut Option<f64>, t: f64, period: f64) -> bool {
        // Tolerance keeps a 100 Hz stream at exactly every fifth frame.
        if last.is_some_and(|l| t - l < period - 1e-9 && t >= l) {
            return false;
        }
        *last = Some(t);
        true
    }
}

impl Monitor for HubMonitor {
    fn status(&mut self, status: &StatusSnapshot) {
        if self.last_status.as_ref() == Some(status) {
            return;
        }
        self.last_status = Some(status.clone());
        let _ = self.tx.send(HubInput::Status(status.clone()));
    }

    fn telemetry(&mut self, seq: u64, telemetry: &Telemetry) {
        if Self::due(&mut self.last_frame, telemetry.frame.timestamp, self.period) {
            let _ = self.tx.send(HubInput::Frame(seq, telemetry.clone()));
        }
    }

    fn feedback(&mut self, feedback: &JointFeedback) {
        if Self::due(&mut self.last_feedback, feedback.t, self.period) {
            let _ = self.tx.send(HubInput::Feedback(feedback.clone()));
        }
    }
}

fn hub_loop(rx: Receiver<HubInput>, shutdown: &AtomicBool) {
    let mut subs: BTreeMap<u64, Sender<Vec<u8>>> = BTreeMap::new();
    let mut status = StatusSnapshot::default();
    let mut push_seq = 0u64;
    while !shutdown.load(Ordering::SeqCst) {
        let input = match rx.recv_timeout(Duration::from_millis(50)) {
            Ok(i) => i,
            Err(RecvTimeoutError::Timeout) => continue,
            Err(RecvTimeoutError::Disconnected) => break,
        };
        let push = match input {
            HubInput::Join { id, seq, tx } => {
                let mut ack = Map::new();
                ack.insert("campaign_id".into(), Value::from(status.campaign_id.clone()));
                ack.insert("push_seq".into(), Value::from(push_seq));
                let _ = tx.send(GatewayMessage::new(seq, GatewayBody::Ack(ack)).encode());
                let _ = tx.send(GatewayMessage::new(push_seq, GatewayBody::Status(status.clone())).encode());
                subs.insert(id, tx);
                None
            }
            HubInput::Leave { id } => {
                subs.remove(&id);
                None
            }
            HubInput::Query { seq, tx } => {
                let mut ack = Map::new();
                ack.insert("status".into(), serde_json::to_value(&status).expect("status serializes"));
                let _ = tx.send(GatewayMessage::new(seq, GatewayBody::Ack(ack)).encode());
                None
            }
            HubInput::Status(s) => {
                status = s.clone();
                Some(GatewayBody::Status(s))
            }
            HubInput::Frame(daemon_seq, telemetry) => Some(GatewayBody::Frame { daemon_seq, telemetry }),
            HubInput::Feedback(f) => Some(GatewayBody::Feedback(f)),
        };
        if let Some(body) = push {
            push_seq += 1;
            let bytes = GatewayMessage::new(push_seq, body).encode();
            subs.retain(|_, tx| tx.send(bytes.clone()).is_ok());
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct GatewayOptions {
    /// Control queue of a running orchestrator; without it controls are refused.
    pub controls: Option<Sender<ControlRequest>>,
    /// Campaign directory served by the dataset endpoint.
    pub dataset: Option<PathBuf>,
}

/// A running gateway. Dropping it stops the server threads.
pub struct Gateway {
    addr: SocketAddr,
    shutdown: Arc<AtomicBool>,
    connections: Arc<AtomicUsize>,
    threads: Vec<JoinHandle<()>>,
}

impl Gateway {
    /// Binds the listener and returns the server plus the monitor to install
    /// on the orchestrator.
    pub fn start(addr: impl ToSocketAddrs, options: GatewayOptions) -> io::Result<(Gateway, HubMonitor)> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        listener.set_nonblocking(true)?;
        let shutdown = Arc::new(AtomicBool::new(false));
        let connections = Arc::new(AtomicUsize::new(0));
        let (hub_tx, hub_rx) = mpsc::channel();
        let hub = {
            let shutdown = shutdown.clone();
            thread::Builder::new().name("gateway-hub".into()).spawn(move || hub_loop(hub_rx, &shutdown))?
        };
        let monitor = HubMonitor { tx: hub_tx.clone(), period: 1.0 / MAX_PUSH_RATE, last_frame: None, last_feedback: None, last_status: None };
        let accept = {
            let shutdown = shutdown.clone();
            let connections = connections.clone();
            let options = Arc::new(options);
            thread::Builder::new().name("gateway-accept".into()).spawn(move || {
                let mut next_id = 0u64;
                while !shutdown.load(Ordering::SeqCst) {
                    match listener.accept() {
                        Ok((stream, _)) => {
                            next_id += 1;
                            let ctx = ConnCtx { id: next_id, hub: hub_tx.clone(), options: options.clone(), shutdown: shutdown.clone() };
                            if let Err(e) = spawn_conn(stream, ctx, connections.clone()) {
                                warn!("gateway connection dropped: {e}");
                            }
                        }
                        Err(e) if e.kind() == ErrorKind::WouldBlock => thread::sleep(POLL),
                        Err(e) => {
                            warn!("gateway accept failed: {e}");
                            thread::sleep(POLL);
                        }
                    }
                }
            })?
        };
        Ok((Gateway { addr, shutdown, connections, threads: vec![hub, accept] }, monitor))
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn connection_count(&self) -> usize {
        self.connections.load(Ordering::SeqCst)
    }

    pub fn stop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
        let deadline = Instant::now() + Duration::from_secs(2);
        while self.connection_count() > 0 && Instant::now() < deadline {
            thread::sleep(POLL);
        }
    }
}

impl Drop for Gateway {
    fn drop(&mut self) {
        self.stop();
    }
}

struct ConnCtx {
    id: u64,
    hub: Sender<HubInput>,
    options: Arc<GatewayOptions>,
    shutdown: Arc<AtomicBool>,
}

fn spawn_conn(stream: TcpStream, ctx: ConnCtx, count: Arc<AtomicUsize>) -> io::Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(Duration::from_millis(50)))?;
    let mut write_half = stream.try_clone()?;
    let (tx, rx) = mpsc::channel::<Vec<u8>>();
    count.fetch_add(1, Ordering::SeqCst);
    let writer = thread::spawn(move || {
        for bytes in rx {
            if write_half.write_all(&bytes).is_err() {
                break;
            }
        }
        let _ = write_half.shutdown(Shutdown::Both);
    });
    thread::spawn(move || {
        conn_loop(stream, &ctx, &tx);
        let _ = ctx.hub.send(HubInput::Leave { id: ctx.id });
        drop(tx);
        let _ = writer.join();
        count.fetch_sub(1, Ordering::SeqCst);
        debug!("gateway connection {} closed", ctx.id);
    });
    Ok(())
}

fn conn_loop(mut stream: TcpStream, ctx: &ConnCtx, tx: &Sender<Vec<u8>>) {
    let mut decoder = FrameDecoder::new();
    let mut buf = vec![0u8; 16 * 1024];
    while !ctx.shutdown.load(Ordering::SeqCst) {
        match stream.read(&mut buf) {
            Ok(0) => break,
            Ok(n) => {
                decoder.push(&buf[..n]);
                while let Some(raw) = decoder.next_raw() {
                    let reply = match raw.and_then(|r| GatewayMessage::from_json(&r)) {
                        Ok(msg) => handle_request(msg, ctx, tx),
                        Err(e) => Some(GatewayMessage::nack(e.seq().unwrap_or(0), e.to_string())),
                    };
                    if let Some(r) = reply {
                        let _ = tx.send(r.encode());
                    }
                }
            }
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut | ErrorKind::Interrupted) => {}
            Err(_) => break,
        }
    }
    let _ = stream.shutdown(Shutdown::Both);
}

/// Answers one console request. `None` means the hub thread replies.
fn handle_request(msg: GatewayMessage, ctx: &ConnCtx, tx: &Sender<Vec<u8>>) -> Option<GatewayMessage> {
    let seq = msg.seq;
    match msg.body {
        GatewayBody::Subscribe { .. } => {
            let _ = ctx.hub.send(HubInput::Join { id: ctx.id, seq, tx: tx.clone() });
            None
        }
        GatewayBody::StatusQuery => {
            let _ = ctx.hub.send(HubInput::Query { seq, tx: tx.clone() });
            None
        }
        GatewayBody::Control(control) => Some(forward_control(seq, control, ctx.options.controls.as_ref())),
        GatewayBody::ListTrials => Some(match ctx.options.dataset.as_deref() {
            Some(dir) => match list_trials(dir) {
                Ok(trials) => GatewayMessage::new(seq, GatewayBody::Trials { trials }),
                Err(e) => GatewayMessage::nack(seq, e),
            },
            None => GatewayMessage::nack(seq, "no dataset attached"),
        }),
        GatewayBody::FetchTrial { trial_id, stream, offset, limit } => Some(match ctx.options.dataset.as_deref() {
            Some(dir) => match fetch_chunk(dir, &trial_id, stream, offset, limit.unwrap_or(MAX_CHUNK)) {
                Ok(body) => GatewayMessage::new(seq, body),
                Err(e) => GatewayMessage::nack(seq, e),
            },
            None => GatewayMessage::nack(seq, "no dataset attached"),
        }),
        other => Some(GatewayMessage::nack(seq, format!("{} is not a request", msg_type_name(&other)))),
    }
}

fn msg_type_name(body: &GatewayBody) -> String {
    serde_json::to_value(body)
        .ok()
        .and_then(|v| v.get("msg_type").and_then(Value::as_str).map(str::to_owned))
        .unwrap_or_default()
}

fn forward_control(seq: u64, control: Control, controls: Option<&Sender<ControlRequest>>) -> GatewayMessage {
    let Some(controls) = controls else {
        return GatewayMessage::nack(seq, "no campaign is running");
    };
    let (reply_tx, reply_rx) = mpsc::channel();
    if controls.send(ControlRequest { control, reply: reply_tx }).is_err() {
        return GatewayMessage::nack(seq, "no campaign is running");
    }
    match reply_rx.recv_timeout(CONTROL_TIMEOUT) {
        Ok(ControlReply::Accepted) => GatewayMessage::new(seq, GatewayBody::Ack(Map::new())),
        Ok(ControlReply::Rejected { reason, max }) => GatewayMessage::new(seq, GatewayBody::Nack { reason, max }),
        Err(_) => GatewayMessage::nack(seq, "orchestrator did not answer"),
    }
}

fn list_trials(dir: &Path) -> Result<Vec<ManifestEntry>, String> {
    let text = std::fs::read_to_string(dir.join(MANIFEST_JSON)).map_err(|e| format!("manifest unreadable: {e}"))?;
    let manifest: CampaignManifest = serde_json::from_str(&text).map_err(|e| format!("manifest invalid: {e}"))?;
    Ok(manifest.trials)
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && !id.contains(['/', '\\']) && !id.starts_with('.')
}

fn fetch_chunk(dir: &Path, trial_id: &str, stream: TrialStream, offset: u64, limit: usize) -> Result<GatewayBody, String> {
    if !valid_id(trial_id) {
        return Err(format!("invalid trial id {trial_id:?}"));
    }
    let trial_dir = dir.join("trials").join(trial_id);
    let name = stream.file_name();
    let (path, partial) = if trial_dir.join(name).exists() || stream == TrialStream::Meta {
        (trial_dir.join(name), false)
    } else {
        (trial_dir.join(format!("{name}{PARTIAL_SUFFIX}")), true)
    };
    let mut f = File::open(&path).map_err(|e| format!("{trial_id}/{name}: {e}"))?;
    let total = f.metadata().map_err(|e| e.to_string())?.len();
    let offset = offset.min(total);
    f.seek(SeekFrom::Start(offset)).map_err(|e| e.to_string())?;
    let mut bytes = Vec::new();
    f.take(limit.clamp(1, MAX_CHUNK) as u64).read_to_end(&mut bytes).map_err(|e| e.to_string())?;
    let text = String::from_utf8(bytes).map_err(|_| "stream is not UTF-8".to_string())?;
    Ok(GatewayBody::Chunk { trial_id: trial_id.to_string(), stream, offset, total, partial, text })
}

/// Blocking console-side client, used by tests and tools.
pub struct GatewayClient {
    stream: TcpStream,
    rx: Receiver<Result<GatewayMessage, DecodeError>>,
    seq: u64,
    pushes: Vec<GatewayMessage>,
}

impl GatewayClient {
    pub fn connect(addr: impl ToSocketAddrs) -> io::Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let mut read_half = stream.try_clone()?;
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            let mut dec = GatewayDecoder::new();
            let mut buf = vec![0u8; 64 * 1024];
            while let Ok(n) = read_half.read(&mut buf) {
                if n == 0 {
                    break;
                }
                dec.push(&buf[..n]);
                while let Some(m) = dec.next() {
                    if tx.send(m).is_err() {
                        return;
                    }
                }
            }
        });
        Ok(GatewayClient { stream, rx, seq: 1000, pushes: Vec::new() })
    }

    /// Current status as cached by the gateway.
    pub fn status(&mut self) -> io::Result<StatusSnapshot> {
        match self.request(GatewayBody::StatusQuery, Duration::from_secs(5))?.body {
            GatewayBody::Ack(mut m) => serde_json::from_value(m.remove("status").unwrap_or_default()).map_err(io::Error::other),
            other => Err(io::Error::other(format!("unexpected reply {other:?}"))),
        }
    }

    /// Sends a request and waits for the reply with the same seq. Pushes that
    /// arrive in between are kept for [`GatewayClient::next_push`].
    pub fn request(&mut self, body: GatewayBody, timeout: Duration) -> io::Result<GatewayMessage> {
        self.seq += 1;
        let seq = self.seq;
        self.send_raw(&GatewayMessage::new(seq, body).encode())?;
        let deadline = Instant::now() + timeout;
        loop {
            let m = self.recv(deadline)?;
            // Pushes are only ever Status, Frame or Feedback.
            if m.seq == seq && !matches!(m.body, GatewayBody::Status(_) | GatewayBody::Frame { .. } | GatewayBody::Feedback(_)) {
                return Ok(m);
            }
            self.pushes.push(m);
        }
    }

    pub fn send_raw(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.stream.write_all(bytes)
    }

    fn recv(&mut self, deadline: Instant) -> io::Result<GatewayMessage> {
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            match self.rx.recv_timeout(left) {
                Ok(Ok(m)) => return Ok(m),
                Ok(Err(e)) => warn!("undecodable gateway frame: {e}"),
                Err(RecvTimeoutError::Timeout) => return Err(io::Error::new(ErrorKind::TimedOut, "gateway timeout")),
                Err(RecvTimeoutError::Disconnected) => return Err(io::Error::new(ErrorKind::UnexpectedEof, "gateway closed")),
            }
        }
    }

    /// Next pushed message, oldest first.
    pub fn next_push(&mut self, timeout: Duration) -> io::Result<GatewayMessage> {
        if !self.pushes.is_empty() {
            return Ok(self.pushes.remove(0));
        }
        self.recv(Instant::now() + timeout)
    }

    /// Fetches a whole stream file by following chunks.
    pub fn fetch_stream(&mut self, trial_id: &str, stream: TrialStream) -> io::Result<(String, bool)> {
        let mut text = String::new();
        let mut offset = 0u64;
        loop {
            let body = GatewayBody::FetchTrial { trial_id: trial_id.into(), stream, offset, limit: None };
            match self.request(body, Duration::from_secs(5))?.body {
                GatewayBody::Chunk { text: t, total, partial, .. } => {
                    offset += t.len() as u64;
                    text.push_str(&t);
                    if offset >= total || t.is_empty() {
                        return Ok((text, partial));
                    }
                }
                GatewayBody::Nack { reason, .. } => return Err(io::Error::other(reason)),
                other => return Err(io::Error::other(format!("unexpected reply {other:?}"))),
            }
        }
    }
}

impl Drop for GatewayClient {
    fn drop(&mut self) {
        let _ = self.stream.shutdown(Shutdown::Both);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn envelope_shape() {
        let m = GatewayMessage::new(7, GatewayBody::Control(Control::ResistanceOverride { newtons: 26.0 }));
        let v: Value = serde_json::from_str(&m.to_json()).unwrap();
        assert_eq!(v["msg_type"], "Control");
        assert_eq!(v["seq"], 7);
        assert_eq!(v["payload"]["control"], "ResistanceOverride");
        assert_eq!(GatewayMessage::from_json(m.to_json().as_bytes()).unwrap(), m);
    }

    #[test]
    fn unit_variants_roundtrip() {
        for body in [GatewayBody::StatusQuery, GatewayBody::ListTrials] {
            let m = GatewayMessage::new(1, body);
            let json = m.to_json();
            assert!(json.contains("\"payload\":null"), "{json}");
            assert_eq!(GatewayMessage::from_json(json.as_bytes()).unwrap(), m);
        }
    }

    #[test]
    fn decimation_to_twenty_hz() {
        let (tx, rx) = mpsc::channel();
        let mut m = HubMonitor { tx, period: 1.0 / MAX_PUSH_RATE, last_frame: None, last_feedback: None, last_status: None };
        for i in 0..100 {
            let f = JointFeedback { t: i as f64 * 0.01, q: vec![], qd: vec![] };
            m.feedback(&f);
        }
        assert_eq!(rx.try_iter().count(), 20);
    }

    #[test]
    fn repeated_status_is_dropped() {
        let (tx, rx) = mpsc::channel();
        let mut m = HubMonitor { tx, period: 0.05, last_frame: None, last_feedback: None, last_status: None };
        let s = StatusSnapshot::default();
        m.status(&s);
        m.status(&s);
        assert_eq!(rx.try_iter().count(), 1);
    }
}

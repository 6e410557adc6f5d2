//! Wire protocol between the orchestrator and a device daemon.
//!
//! Every frame is a 4-byte big-endian length followed by that many bytes of
//! UTF-8 JSON:
//!
//! ```text
//! {"msg_type":"Command","seq":7,"payload":{"command":"SetResistance","newtons":26.0}}
//! ```
//!
//! The decoder resynchronises after corruption by sliding one byte at a time
//! until a plausible frame parses again; each contiguous run of garbage is
//! reported once.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::model::{AttachmentKind, TestbedKind};
use crate::sim::grip::ArmCoupling;
use crate::sim::{SensorFrame, TestbedState};

pub const PROTOCOL_VERSION: u32 = 1;
/// Frames longer than this are treated as corruption.
pub const MAX_FRAME_LEN: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MsgType {
    Hello,
    Status,
    Command,
    Ack,
    Nack,
    Telemetry,
    Event,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Control,
    Telemetry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hello {
    pub role: Role,
    #[serde(default)]
    pub client: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "fault", deny_unknown_fields)]
pub enum InjectedFault {
    /// Position sensor reports a constant reading.
    FreezePosition { reading: f64 },
    UnfreezePosition,
    /// Knocks the testbed off its mounts.
    Dislodge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", deny_unknown_fields)]
pub enum Command {
    SetResistance { newtons: f64 },
    Reset,
    ReleaseSlack,
    StartStream,
    StopStream,
    StartRecord {
        trial_id: String,
        #[serde(default)]
        metadata: Value,
    },
    StopRecord,
    Abort,
    ClearFault,
    GetStatus,
    /// Lockstep clock only: advance simulated time.
    Advance { seconds: f64 },
    /// Simulator only: how the manipulator holds and drives the attachment.
    /// With `retain_grip` the grip already held (including any slip it has
    /// accumulated) is kept and the coupling's own grip is ignored.
    Interact {
        coupling: Option<ArmCoupling>,
        #[serde(default)]
        retain_grip: bool,
    },
    /// Simulator only.
    InjectFault(InjectedFault),
}

impl Command {
    pub const NAMES: [&'static str; 13] = [
        "SetResistance",
        "Reset",
        "ReleaseSlack",
        "StartStream",
        "StopStream",
        "StartRecord",
        "StopRecord",
        "Abort",
        "ClearFault",
        "GetStatus",
        "Advance",
        "Interact",
        "InjectFault",
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Command::SetResistance { .. } => "SetResistance",
            Command::Reset => "Reset",
            Command::ReleaseSlack => "ReleaseSlack",
            Command::StartStream => "StartStream",
            Command::StopStream => "StopStream",
            Command::StartRecord { .. } => "StartRecord",
            Command::StopRecord => "StopRecord",
            Command::Abort => "Abort",
            Command::ClearFault => "ClearFault",
            Command::GetStatus => "GetStatus",
            Command::Advance { .. } => "Advance",
            Command::Interact { .. } => "Interact",
            Command::InjectFault(_) => "InjectFault",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NackCode {
    RangeError,
    Busy,
    Unsupported,
    Malformed,
    NotIdle,
    Faulted,
    InvalidState,
    NotControl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Nack {
    pub code: NackCode,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max: Option<f64>,
}

impl Nack {
    pub fn new(code: NackCode, message: impl Into<String>) -> Self {
        Nack { code, message: message.into(), max: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FaultKind {
    ResetTimeout,
    Dislodged,
    Backend,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event")]
pub enum DaemonEvent {
    ResetComplete,
    SlackReleased,
    Fault { kind: FaultKind },
    FaultCleared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Telemetry {
    pub frame: SensorFrame,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trial_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusReport {
    pub testbed: TestbedKind,
    pub attachment: AttachmentKind,
    pub state: TestbedState,
    pub streaming: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recording: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fault: Option<FaultKind>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Body {
    Hello(Hello),
    Status(StatusReport),
    Command(Command),
    Ack(Map<String, Value>),
    Nack(Nack),
    Telemetry(Telemetry),
    Event(DaemonEvent),
}

impl Body {
    pub fn msg_type(&self) -> MsgType {
        match self {
            Body::Hello(_) => MsgType::Hello,
            Body::Status(_) => MsgType::Status,
            Body::Command(_) => MsgType::Command,
            Body::Ack(_) => MsgType::Ack,
            Body::Nack(_) => MsgType::Nack,
            Body::Telemetry(_) => MsgType::Telemetry,
            Body::Event(_) => MsgType::Event,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WireMessage {
    pub seq: u64,
    pub body: Body,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Envelope {
    msg_type: MsgType,
    seq: u64,
    payload: Value,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DecodeError {
    #[error("malformed frame: {reason}")]
    Malformed { seq: Option<u64>, reason: String },
    #[error("unsupported command {command:?}")]
    Unsupported { seq: u64, command: String },
}

impl DecodeError {
    pub fn seq(&self) -> Option<u64> {
        match self {
            DecodeError::Malformed { seq, .. } => *seq,
            DecodeError::Unsupported { seq, .. } => Some(*seq),
        }
    }

    /// The reply a daemon owes the sender for this error.
    pub fn to_nack(&self) -> WireMessage {
        let (code, message) = match self {
            DecodeError::Malformed { reason, .. } => (NackCode::Malformed, reason.clone()),
            DecodeError::Unsupported { command, .. } => (NackCode::Unsupported, format!("unknown command {command:?}")),
        };
        WireMessage { seq: self.seq().unwrap_or(0), body: Body::Nack(Nack::new(code, message)) }
    }
}

impl WireMessage {
    pub fn new(seq: u64, body: Body) -> Self {
        WireMessage { seq, body }
    }

    pub fn command(seq: u64, command: Command) -> Self {
        WireMessage { seq, body: Body::Command(command) }
    }

    pub fn ack(seq: u64, payload: Map<String, Value>) -> Self {
        WireMessage { seq, body: Body::Ack(payload) }
    }

    pub fn nack(seq: u64, nack: Nack) -> Self {
        WireMessage { seq, body: Body::Nack(nack) }
    }

    pub fn to_json(&self) -> String {
        let payload = match &self.body {
            Body::Hello(h) => serde_json::to_value(h),
            Body::Status(s) => serde_json::to_value(s),
            Body::Command(c) => serde_json::to_value(c),
            Body::Ack(m) => Ok(Value::Object(m.clone())),
            Body::Nack(n) => serde_json::to_value(n),
            Body::Telemetry(t) => serde_json::to_value(t),
            Body::Event(e) => serde_json::to_value(e),
        }
        .expect("wire payloads serialize");
        serde_json::to_string(&Envelope { msg_type: self.body.msg_type(), seq: self.seq, payload })
            .expect("envelope serializes")
    }

    /// Length-prefixed frame bytes.
    pub fn encode(&self) -> Vec<u8> {
        encode_frame(self.to_json().as_bytes())
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, DecodeError> {
        let value: Value = serde_json::from_slice(bytes)
            .map_err(|e| DecodeError::Malformed { seq: None, reason: e.to_string() })?;
        let seq = value.get("seq").and_then(Value::as_u64);
        let malformed = |reason: String| DecodeError::Malformed { seq, reason };
        let env: Envelope = serde_json::from_value(value).map_err(|e| malformed(e.to_string()))?;
        let p = env.payload;
        let body = match env.msg_type {
            MsgType::Hello => Body::Hello(serde_json::from_value(p).map_err(|e| malformed(e.to_string()))?),
            MsgType::Status => Body::Status(serde_json::from_value(p).map_err(|e| malformed(e.to_string()))?),
            MsgType::Command => {
                let name = p.get("command").and_then(Value::as_str).map(str::to_owned);
                match name {
                    Some(n) if !Command::NAMES.contains(&n.as_str()) => {
                        return Err(DecodeError::Unsupported { seq: env.seq, command: n });
                    }
                    _ => Body::Command(serde_json::from_value(p).map_err(|e| malformed(e.to_string()))?),
                }
            }
            MsgType::Ack => match p {
                Value::Object(m) => Body::Ack(m),
                _ => return Err(malformed("ack payload must be an object".into())),
            },
            MsgType::Nack => Body::Nack(serde_json::from_value(p).map_err(|e| malformed(e.to_string()))?),
            MsgType::Telemetry => Body::Telemetry(serde_json::from_value(p).map_err(|e| malformed(e.to_string()))?),
            MsgType::Event => Body::Event(serde_json::from_value(p).map_err(|e| malformed(e.to_string()))?),
        };
        Ok(WireMessage { seq: env.seq, body })
    }
}

pub fn encode_frame(payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(payload.len() + 4);
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.extend_from_slice(payload);
    out
}

/// One item pulled out of a byte stream.
#[derive(Debug, Clone, PartialEq)]
pub enum Decoded<T> {
    Message(T),
    Error(DecodeError),
}

/// Incremental length-prefixed JSON frame decoder with resynchronisation.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
    start: usize,
    in_garbage: bool,
}

/// Raw frame payload, before envelope parsing.
pub type RawFrame = Vec<u8>;

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        if self.start > 0 && self.start * 2 >= self.buf.len() {
            self.buf.drain(..self.start);
            self.start = 0;
        }
        self.buf.extend_from_slice(bytes);
    }

    pub fn buffered(&self) -> usize {
        self.buf.len() - self.start
    }

    fn skip_garbage_byte(&mut self) -> Option<DecodeError> {
        self.start += 1;
        if self.in_garbage {
            None
        } else {
            self.in_garbage = true;
            Some(DecodeError::Malformed { seq: None, reason: "corrupt or misaligned frame".into() })
        }
    }

    /// Next complete JSON payload, a corruption report, or `None` when more
    /// bytes are needed.
    pub fn next_raw(&mut self) -> Option<Result<RawFrame, DecodeError>> {
        loop {
            let avail = self.buffered();
            if avail < 4 {
                return None;
            }
            let s = self.start;
            let len = u32::from_be_bytes([self.buf[s], self.buf[s + 1], self.buf[s + 2], self.buf[s + 3]]) as usize;
            if len == 0 || len > MAX_FRAME_LEN {
                if let Some(e) = self.skip_garbage_byte() {
                    return Some(Err(e));
                }
                continue;
            }
            if avail < 5 {
                return None;
            }
            if self.buf[s + 4] != b'{' {
                if let Some(e) = self.skip_garbage_byte() {
                    return Some(Err(e));
                }
                continue;
            }
            if avail < 4 + len {
                return None;
            }
            let payload = &self.buf[s + 4..s + 4 + len];
            if serde_json::from_slice::<serde::de::IgnoredAny>(payload).is_err() {
                if let Some(e) = self.skip_garbage_byte() {
                    return Some(Err(e));
                }
                continue;
            }
            let frame = payload.to_vec();
            self.start += 4 + len;
            self.in_garbage = false;
            return Some(Ok(frame));
        }
    }

    /// Next decoded wire message.
    pub fn next_message(&mut self) -> Option<Decoded<WireMessage>> {
        self.next_raw().map(|r| match r.and_then(|raw| WireMessage::from_json(&raw)) {
            Ok(m) => Decoded::Message(m),
            Err(e) => Decoded::Error(e),
        })
    }

    /// Gives up waiting on a partial frame at the head of the buffer and treats
    /// its first byte as garbage. Used after a read timeout and at end of stream.
    pub fn stall(&mut self) -> Option<DecodeError> {
        if self.buffered() == 0 {
            return None;
        }
        self.skip_garbage_byte()
    }

    /// Drains everything, including trailing partial frames, at end of stream.
    pub fn finish(&mut self) -> Vec<Decoded<WireMessage>> {
        let mut out = Vec::new();
        loop {
            while let Some(d) = self.next_message() {
                out.push(d);
            }
            if self.buffered() == 0 {
                break;
            }
            if let Some(e) = self.stall() {
                out.push(Decoded::Error(e));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{FrameFlags, ResetMotor};

    #[test]
    fn set_resistance_frame_bytes() {
        let msg = WireMessage::command(7, Command::SetResistance { newtons: 26.0 });
        let json = msg.to_json();
        assert_eq!(
            json,
            r#"{"msg_type":"Command","seq":7,"payload":{"command":"SetResistance","newtons":26.0}}"#
        );
        let frame = msg.encode();
        assert_eq!(&frame[..4], &(json.len() as u32).to_be_bytes());
        assert_eq!(hex::encode(&frame[..8]), "000000537b226d73");
    }

    #[test]
    fn telemetry_roundtrip() {
        let frame = SensorFrame {
            timestamp: 0.01,
            seq: 3,
            opening_measured: 12.0,
            fsr_counts: vec![0, 4095, 12],
            resistance_setting: 7.0,
            reset_motor: ResetMotor::Idle,
            flags: FrameFlags(2),
            truth: None,
        };
        let msg = WireMessage::new(3, Body::Telemetry(Telemetry { frame, trial_id: Some("t-1".into()) }));
        assert_eq!(WireMessage::from_json(msg.to_json().as_bytes()).unwrap(), msg);
    }

    #[test]
    fn unknown_command_is_unsupported() {
        let raw = br#"{"msg_type":"Command","seq":4,"payload":{"command":"Explode"}}"#;
        assert_eq!(
            WireMessage::from_json(raw),
            Err(DecodeError::Unsupported { seq: 4, command: "Explode".into() })
        );
        let bad = br#"{"msg_type":"Command","seq":5,"payload":{"command":"SetResistance","newtons":"x"}}"#;
        assert!(matches!(WireMessage::from_json(bad), Err(DecodeError::Malformed { seq: Some(5), .. })));
    }

    #[test]
    fn decoder_handles_split_input() {
        let a = WireMessage::command(1, Command::Reset).encode();
        let b = WireMessage::command(2, Command::Abort).encode();
        let all: Vec<u8> = a.iter().chain(&b).copied().collect();
        let mut d = FrameDecoder::new();
        let mut got = Vec::new();
        for chunk in all.chunks(3) {
            d.push(chunk);
            while let Some(m) = d.next_message() {
                got.push(m);
            }
        }
        assert_eq!(got.len(), 2);
        assert_eq!(got[1], Decoded::Message(WireMessage::command(2, Command::Abort)));
    }

    #[test]
    fn truncated_prefix_resyncs_on_next_frame() {
        let a = WireMessage::command(1, Command::Reset).encode();
        let b = WireMessage::command(2, Command::Abort).encode();
        let mut stream = a[2..].to_vec();
        stream.extend_from_slice(&b);
        let mut d = FrameDecoder::new();
        d.push(&stream);
        let out = d.finish();
        assert_eq!(out.len(), 2, "{out:?}");
        assert!(matches!(out[0], Decoded::Error(DecodeError::Malformed { .. })));
        assert_eq!(out[1], Decoded::Message(WireMessage::command(2, Command::Abort)));
    }

    #[test]
    fn oversized_claim_does_not_swallow_following_frames() {
        let mut a = WireMessage::command(1, Command::Reset).encode();
        a[1] = 0x01; // claims ~64 KiB
        let b = WireMessage::command(2, Command::Abort).encode();
        let mut d = FrameDecoder::new();
        d.push(&a);
        d.push(&b);
        assert_eq!(d.next_message(), None);
        let out = d.finish();
        assert_eq!(out.len(), 2, "{out:?}");
        assert_eq!(out[1], Decoded::Message(WireMessage::command(2, Command::Abort)));
    }
}

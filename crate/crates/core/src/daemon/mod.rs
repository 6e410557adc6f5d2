//! The on-testbed daemon: owns one backend, executes commands, streams telemetry.
//!
//! [`DaemonCore`] is the transport-free command executor. [`server`] wraps it
//! in a TCP service with one control connection and any number of telemetry
//! subscribers; in-process links drive it directly.

pub mod server;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::model::{AttachmentKind, PullAttachment, TestbedKind};
use crate::protocol::{
    Body, Command, DaemonEvent, FaultKind, Hello, InjectedFault, Nack, NackCode, Role, StatusReport, Telemetry,
    WireMessage, PROTOCOL_VERSION,
};
use crate::sim::grip::ArmCoupling;
use crate::sim::{SensorFrame, SimError, SimEvent, SimParams, Testbed, TestbedState, DEFAULT_DT};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ClockMode {
    RealTime,
    /// Simulated time runs `factor` times faster than wall time.
    Accelerated { factor: f64 },
    /// Simulated time only advances on `Advance` commands.
    Lockstep,
}

impl ClockMode {
    /// Simulated seconds per wall second, if free-running.
    pub fn rate(self) -> Option<f64> {
        match self {
            ClockMode::RealTime => Some(1.0),
            ClockMode::Accelerated { factor } => Some(factor),
            ClockMode::Lockstep => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackendKind {
    Sim,
    HardwareStub,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DaemonConfig {
    pub listen_address: String,
    pub testbed: TestbedKind,
    pub attachment: AttachmentKind,
    #[serde(default = "default_rate")]
    pub telemetry_rate: f64,
    #[serde(default = "default_backend")]
    pub backend: BackendKind,
    #[serde(default = "default_clock")]
    pub clock: ClockMode,
    /// Simulator parameter overrides, merged over the testbed defaults.
    #[serde(default)]
    pub sim: Option<Value>,
}

fn default_rate() -> f64 {
    100.0
}
fn default_backend() -> BackendKind {
    BackendKind::Sim
}
fn default_clock() -> ClockMode {
    ClockMode::RealTime
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("telemetry rate {0} Hz outside 10..=200")]
    TelemetryRate(f64),
    #[error("accelerated clock factor must be positive, got {0}")]
    ClockFactor(f64),
    #[error("sim parameters: {0}")]
    Sim(#[from] SimError),
    #[error("sim parameters are for {found}, daemon is configured for {expected}")]
    TestbedMismatch { expected: TestbedKind, found: TestbedKind },
    #[error("config parse: {0}")]
    Parse(#[from] serde_json::Error),
}

impl DaemonConfig {
    pub fn sim(testbed: TestbedKind, attachment: AttachmentKind) -> Self {
        DaemonConfig {
            listen_address: "127.0.0.1:0".into(),
            testbed,
            attachment,
            telemetry_rate: default_rate(),
            backend: BackendKind::Sim,
            clock: ClockMode::Lockstep,
            sim: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let c: DaemonConfig = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(10.0..=200.0).contains(&self.telemetry_rate) {
            return Err(ConfigError::TelemetryRate(self.telemetry_rate));
        }
        if let ClockMode::Accelerated { factor } = self.clock {
            if !(factor > 0.0 && factor.is_finite()) {
                return Err(ConfigError::ClockFactor(factor));
            }
        }
        Ok(())
    }

    pub fn sim_params(&self) -> Result<SimParams, ConfigError> {
        let params = match &self.sim {
            None => SimParams::for_testbed(self.testbed),
            Some(v) => {
                let mut v = v.clone();
                if let Value::Object(m) = &mut v {
                    m.entry("testbed").or_insert_with(|| json!(self.testbed));
                }
                SimParams::from_value(v)?
            }
        };
        if params.testbed != self.testbed {
            return Err(ConfigError::TestbedMismatch { expected: self.testbed, found: params.testbed });
        }
        Ok(params)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("value {value} out of range (max {max})")]
    OutOfRange { value: f64, max: f64 },
    #[error("testbed busy")]
    NotIdle,
    #[error("testbed faulted: {0}")]
    Faulted(String),
    #[error("{0} not supported by this backend")]
    Unsupported(&'static str),
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("backend unavailable: {0}")]
    Unavailable(String),
}

impl From<SimError> for BackendError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::OutOfRange { value, max } => BackendError::OutOfRange { value, max },
            SimError::NotIdle(_) | SimError::PullActive => BackendError::NotIdle,
            SimError::Dislodged => BackendError::Faulted(e.to_string()),
            other => BackendError::Invalid(other.to_string()),
        }
    }
}

/// What the daemon needs from a testbed. The simulator implements it; a real
/// driver stack (stepper, brake, electromagnets, ToF/encoder, ADCs) would too.
pub trait Backend: Send {
    fn testbed(&self) -> TestbedKind;
    fn attachment(&self) -> AttachmentKind;
    fn channel_count(&self) -> usize;
    fn state(&self) -> TestbedState;
    fn set_resistance(&mut self, newtons: f64) -> Result<(), BackendError>;
    fn begin_reset(&mut self) -> Result<(), BackendError>;
    fn release_slack(&mut self) -> Result<(), BackendError>;
    /// Halts the reset motor and releases brake/magnets.
    fn abort(&mut self);
    fn clear_fault(&mut self);
    fn step(&mut self, dt: f64) -> Result<(), BackendError>;
    fn sense(&mut self) -> SensorFrame;
    fn drain_events(&mut self) -> Vec<SimEvent>;

    fn interact(&mut self, _coupling: Option<ArmCoupling>, _retain_grip: bool) -> Result<(), BackendError> {
        Err(BackendError::Unsupported("Interact"))
    }

    fn inject(&mut self, _fault: &InjectedFault) -> Result<(), BackendError> {
        Err(BackendError::Unsupported("InjectFault"))
    }

    /// Whether a manipulator coupling is acting on the attachment.
    fn coupled(&self) -> bool {
        false
    }
}

impl Backend for Testbed {
    fn testbed(&self) -> TestbedKind {
        self.kind()
    }
    fn attachment(&self) -> AttachmentKind {
        Testbed::attachment(self).kind
    }
    fn channel_count(&self) -> usize {
        Testbed::attachment(self).channel_count()
    }
    fn state(&self) -> TestbedState {
        Testbed::state(self).clone()
    }
    fn coupled(&self) -> bool {
        self.coupling().is_some()
    }
    fn set_resistance(&mut self, newtons: f64) -> Result<(), BackendError> {
        Ok(Testbed::set_resistance(self, newtons)?)
    }
    fn begin_reset(&mut self) -> Result<(), BackendError> {
        Ok(Testbed::begin_reset(self)?)
    }
    fn release_slack(&mut self) -> Result<(), BackendError> {
        Ok(Testbed::release_slack(self)?)
    }
    fn abort(&mut self) {
        Testbed::abort(self)
    }
    fn clear_fault(&mut self) {
        Testbed::clear_fault(self)
    }
    fn step(&mut self, dt: f64) -> Result<(), BackendError> {
        Ok(self.step_coupled(dt)?)
    }
    fn sense(&mut self) -> SensorFrame {
        Testbed::sense(self)
    }
    fn drain_events(&mut self) -> Vec<SimEvent> {
        Testbed::drain_events(self)
    }
    fn interact(&mut self, mut coupling: Option<ArmCoupling>, retain_grip: bool) -> Result<(), BackendError> {
        if retain_grip {
            if let Some(c) = coupling.as_mut() {
                c.grip = self.grip().cloned();
            }
        }
        Ok(self.set_coupling(coupling)?)
    }
    fn inject(&mut self, fault: &InjectedFault) -> Result<(), BackendError> {
        match fault {
            InjectedFault::FreezePosition { reading } => self.freeze_position_sensor(Some(*reading)),
            InjectedFault::UnfreezePosition => self.freeze_position_sensor(None),
            InjectedFault::Dislodge => self.check_safety(f64::INFINITY),
        }
        Ok(())
    }
}

/// Placeholder for the physical driver stack. Opening it always fails in
/// this build, which the daemon reports as a backend initialisation failure.
#[derive(Debug)]
pub struct HardwareStub;

impl HardwareStub {
    pub fn open(_config: &DaemonConfig) -> Result<Box<dyn Backend>, BackendError> {
        Err(BackendError::Unavailable("no hardware drivers are built into this daemon".into()))
    }
}

/// Builds the backend named in the config.
pub fn open_backend(config: &DaemonConfig) -> Result<Box<dyn Backend>, BackendError> {
    match config.backend {
        BackendKind::Sim => {
            let params = config.sim_params().map_err(|e| BackendError::Unavailable(e.to_string()))?;
            let tb = Testbed::new(params, PullAttachment::of(config.attachment))?;
            Ok(Box::new(tb))
        }
        BackendKind::HardwareStub => HardwareStub::open(config),
    }
}

/// Transport-free command executor around one backend.
pub struct DaemonCore {
    backend: Box<dyn Backend>,
    config: DaemonConfig,
    streaming: bool,
    recording: Option<String>,
    recorded_frames: u64,
    fault: Option<FaultKind>,
    telemetry_seq: u64,
    event_seq: u64,
    steps_per_frame: u64,
    step_count: u64,
    pending: f64,
}

impl DaemonCore {
    pub fn new(config: DaemonConfig, backend: Box<dyn Backend>) -> Result<Self, ConfigError> {
        config.validate()?;
        let steps_per_frame = ((1.0 / config.telemetry_rate) / DEFAULT_DT).round().max(1.0) as u64;
        Ok(DaemonCore {
            backend,
            config,
            streaming: false,
            recording: None,
            recorded_frames: 0,
            fault: None,
            telemetry_seq: 0,
            event_seq: 0,
            steps_per_frame,
            step_count: 0,
            pending: 0.0,
        })
    }

    /// A lockstep simulator daemon with the given parameters.
    pub fn simulated(params: SimParams, attachment: AttachmentKind) -> Result<Self, ConfigError> {
        let config = DaemonConfig::sim(params.testbed, attachment);
        let tb = Testbed::new(params, PullAttachment::of(attachment))?;
        Self::new(config, Box::new(tb))
    }

    pub fn config(&self) -> &DaemonConfig {
        &self.config
    }

    pub fn backend(&self) -> &dyn Backend {
        self.backend.as_ref()
    }

    pub fn backend_mut(&mut self) -> &mut dyn Backend {
        self.backend.as_mut()
    }

    pub fn fault(&self) -> Option<FaultKind> {
        self.fault
    }

    pub fn recording(&self) -> Option<&str> {
        self.recording.as_deref()
    }

    pub fn hello_payload(&self) -> Map<String, Value> {
        let mut m = Map::new();
        m.insert("testbed".into(), json!(self.backend.testbed()));
        m.insert("attachment".into(), json!(self.backend.attachment()));
        m.insert("protocol_version".into(), json!(PROTOCOL_VERSION));
        m.insert("channel_count".into(), json!(self.backend.channel_count()));
        m.insert("telemetry_rate".into(), json!(self.config.telemetry_rate));
        m.insert("clock".into(), json!(self.config.clock));
        m
    }

    pub fn status(&self) -> StatusReport {
        StatusReport {
            testbed: self.backend.testbed(),
            attachment: self.backend.attachment(),
            state: self.backend.state(),
            streaming: self.streaming,
            recording: self.recording.clone(),
            fault: self.fault,
        }
    }

    fn event(&mut self, event: DaemonEvent) -> WireMessage {
        self.event_seq += 1;
        WireMessage::new(self.event_seq, Body::Event(event))
    }

    /// Handles a Hello for the given (already admitted) role.
    pub fn hello(&self, seq: u64, _hello: &Hello) -> WireMessage {
        WireMessage::ack(seq, self.hello_payload())
    }

    /// Executes one command. Returns the Ack/Nack with the command's seq plus
    /// any telemetry and events produced while executing it.
    pub fn execute(&mut self, seq: u64, command: Command) -> (WireMessage, Vec<WireMessage>) {
        let mut out = Vec::new();
        let reply = match self.dispatch(command, &mut out) {
            Ok(payload) => WireMessage::ack(seq, payload),
            Err(nack) => WireMessage::nack(seq, nack),
        };
        (reply, out)
    }

    fn guard_fault(&self) -> Result<(), Nack> {
        match self.fault {
            Some(kind) => Err(Nack::new(NackCode::Faulted, format!("testbed fault {kind:?}; ClearFault first"))),
            None => Ok(()),
        }
    }

    fn dispatch(&mut self, command: Command, out: &mut Vec<WireMessage>) -> Result<Map<String, Value>, Nack> {
        let mut ack = Map::new();
        match command {
            Command::SetResistance { newtons } => {
                self.guard_fault()?;
                if !newtons.is_finite() {
                    return Err(Nack::new(NackCode::Malformed, "resistance must be finite"));
                }
                self.backend.set_resistance(newtons).map_err(nack_from)?;
                ack.insert("resistance".into(), json!(newtons));
            }
            Command::Reset => {
                if self.fault == Some(FaultKind::ResetTimeout) {
                    // Retrying a reset clears its own timeout.
                    self.fault = None;
                    self.backend.clear_fault();
                }
                self.guard_fault()?;
                self.backend.begin_reset().map_err(nack_from)?;
            }
            Command::ReleaseSlack => {
                self.guard_fault()?;
                self.backend.release_slack().map_err(nack_from)?;
            }
            Command::StartStream => self.streaming = true,
            Command::StopStream => self.streaming = false,
            Command::StartRecord { trial_id, .. } => {
                if trial_id.is_empty() {
                    return Err(Nack::new(NackCode::Malformed, "empty trial_id"));
                }
                self.recording = Some(trial_id);
                self.recorded_frames = 0;
            }
            Command::StopRecord => {
                let id = self.recording.take();
                ack.insert("trial_id".into(), json!(id));
                ack.insert("frames".into(), json!(self.recorded_frames));
            }
            Command::Abort => {
                self.backend.abort();
            }
            Command::ClearFault => {
                self.backend.clear_fault();
                if self.fault.take().is_some() {
                    let ev = self.event(DaemonEvent::FaultCleared);
                    out.push(ev);
                }
            }
            Command::GetStatus => {
                let status = serde_json::to_value(self.status()).expect("status serializes");
                ack.insert("status".into(), status);
            }
            Command::Advance { seconds } => {
                if self.config.clock != ClockMode::Lockstep {
                    return Err(Nack::new(NackCode::Unsupported, "Advance requires a lockstep clock"));
                }
                if !(seconds > 0.0 && seconds <= 60.0) {
                    return Err(Nack::new(NackCode::RangeError, format!("advance of {seconds} s outside (0, 60]")));
                }
                self.advance(seconds, out).map_err(nack_from)?;
                ack.insert("clock".into(), json!(self.backend.state().clock));
            }
            Command::Interact { coupling, retain_grip } => {
                if coupling.is_some() {
                    self.guard_fault()?;
                }
                self.backend.interact(coupling, retain_grip).map_err(nack_from)?;
            }
            Command::InjectFault(fault) => {
                self.backend.inject(&fault).map_err(nack_from)?;
                self.collect_events(out);
            }
        }
        Ok(ack)
    }

    fn collect_events(&mut self, out: &mut Vec<WireMessage>) {
        for ev in self.backend.drain_events() {
            let event = match ev {
                SimEvent::ResetComplete => DaemonEvent::ResetComplete,
                SimEvent::SlackReleased => DaemonEvent::SlackReleased,
                SimEvent::ResetTimeout => {
                    self.fault = Some(FaultKind::ResetTimeout);
                    DaemonEvent::Fault { kind: FaultKind::ResetTimeout }
                }
                SimEvent::Dislodged => {
                    self.fault = Some(FaultKind::Dislodged);
                    DaemonEvent::Fault { kind: FaultKind::Dislodged }
                }
            };
            let msg = self.event(event);
            out.push(msg);
        }
    }

    /// Advances the backend clock by `seconds` in fixed internal steps,
    /// appending telemetry and events to `out`.
    pub fn advance(&mut self, seconds: f64, out: &mut Vec<WireMessage>) -> Result<(), BackendError> {
        self.pending += seconds;
        while self.pending >= DEFAULT_DT - 1e-9 {
            self.pending -= DEFAULT_DT;
            if let Err(e) = self.backend.step(DEFAULT_DT) {
                self.fault = Some(FaultKind::Backend);
                let ev = self.event(DaemonEvent::Fault { kind: FaultKind::Backend });
                out.push(ev);
                return Err(e);
            }
            self.step_count += 1;
            self.collect_events(out);
            if self.streaming && self.step_count % self.steps_per_frame == 0 {
                let frame = self.backend.sense();
                self.telemetry_seq += 1;
                if self.recording.is_some() {
                    self.recorded_frames += 1;
                }
                out.push(WireMessage::new(
                    self.telemetry_seq,
                    Body::Telemetry(Telemetry { frame, trial_id: self.recording.clone() }),
                ));
            }
        }
        Ok(())
    }

    /// Puts the testbed in a safe state after the controller goes away.
    pub fn control_lost(&mut self) {
        self.backend.abort();
        self.recording = None;
    }

    /// Replies to a message received on a connection holding `role`.
    pub fn handle_message(&mut self, role: Option<Role>, msg: WireMessage) -> (WireMessage, Vec<WireMessage>) {
        match msg.body {
            Body::Hello(h) => (self.hello(msg.seq, &h), Vec::new()),
            Body::Command(c) => {
                if role != Some(Role::Control) {
                    let nack = Nack::new(NackCode::NotControl, "commands require a control connection");
                    return (WireMessage::nack(msg.seq, nack), Vec::new());
                }
                self.execute(msg.seq, c)
            }
            other => {
                let nack = Nack::new(NackCode::Malformed, format!("unexpected {:?} from client", other.msg_type()));
                (WireMessage::nack(msg.seq, nack), Vec::new())
            }
        }
    }
}

fn nack_from(e: BackendError) -> Nack {
    match e {
        BackendError::OutOfRange { value, max } => Nack {
            code: NackCode::RangeError,
            message: format!("{value} out of range, max {max}"),
            max: Some(max),
        },
        BackendError::NotIdle => Nack::new(NackCode::NotIdle, e.to_string()),
        BackendError::Faulted(m) => Nack::new(NackCode::Faulted, m),
        BackendError::Unsupported(_) => Nack::new(NackCode::Unsupported, e.to_string()),
        BackendError::Invalid(m) => Nack::new(NackCode::Malformed, m),
        BackendError::Unavailable(m) => Nack::new(NackCode::InvalidState, m),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::ResetMotor;

    fn drawer() -> DaemonCore {
        DaemonCore::simulated(SimParams::for_testbed(TestbedKind::Drawer).with_seed(1), AttachmentKind::Handle).unwrap()
    }

    fn ok(core: &mut DaemonCore, c: Command) -> Vec<WireMessage> {
        let (reply, out) = core.execute(1, c);
        assert!(matches!(reply.body, Body::Ack(_)), "{reply:?}");
        out
    }

    #[test]
    fn hello_reports_identity() {
        let core = drawer();
        let ack = core.hello(3, &Hello { role: Role::Control, client: "t".into() });
        assert_eq!(ack.seq, 3);
        let Body::Ack(m) = ack.body else { panic!() };
        assert_eq!(m["testbed"], json!("Drawer"));
        assert_eq!(m["attachment"], json!("Handle"));
        assert_eq!(m["protocol_version"], json!(1));
    }

    #[test]
    fn over_range_resistance_is_nacked_with_max() {
        let mut core = drawer();
        let (reply, _) = core.execute(9, Command::SetResistance { newtons: 26.0 });
        assert_eq!(reply.seq, 9);
        match reply.body {
            Body::Nack(n) => {
                assert_eq!(n.code, NackCode::RangeError);
                assert_eq!(n.max, Some(25.0));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn recording_tags_every_frame() {
        let mut core = drawer();
        ok(&mut core, Command::StartStream);
        ok(&mut core, Command::StartRecord { trial_id: "trial-a".into(), metadata: Value::Null });
        let mut out = Vec::new();
        core.advance(1.0, &mut out).unwrap();
        let frames: Vec<_> = out
            .iter()
            .filter_map(|m| match &m.body {
                Body::Telemetry(t) => Some(t),
                _ => None,
            })
            .collect();
        assert_eq!(frames.len(), 100);
        assert!(frames.iter().all(|t| t.trial_id.as_deref() == Some("trial-a")));
        let (reply, _) = core.execute(2, Command::StopRecord);
        let Body::Ack(m) = reply.body else { panic!() };
        assert_eq!(m["frames"], json!(100));
        let mut out = Vec::new();
        core.advance(0.1, &mut out).unwrap();
        assert!(out.iter().all(|m| matches!(&m.body, Body::Telemetry(t) if t.trial_id.is_none())));
    }

    #[test]
    fn reset_completes_with_event() {
        let mut core = drawer();
        ok(&mut core, Command::ReleaseSlack);
        let mut out = Vec::new();
        core.advance(5.0, &mut out).unwrap();
        assert!(out.iter().any(|m| m.body == Body::Event(DaemonEvent::SlackReleased)));
        ok(&mut core, Command::Reset);
        let mut out = Vec::new();
        core.advance(5.0, &mut out).unwrap();
        assert!(out.iter().any(|m| m.body == Body::Event(DaemonEvent::ResetComplete)));
        assert_eq!(core.backend().state().reset_motor, ResetMotor::Idle);
    }

    #[test]
    fn abort_stops_winding_immediately() {
        let mut core = drawer();
        ok(&mut core, Command::Reset);
        let mut out = Vec::new();
        core.advance(0.01, &mut out).unwrap();
        assert_eq!(core.backend().state().reset_motor, ResetMotor::WindingIn);
        ok(&mut core, Command::Abort);
        core.advance(0.001, &mut out).unwrap();
        assert_eq!(core.backend().state().reset_motor, ResetMotor::Idle);
    }

    #[test]
    fn frozen_sensor_raises_fault_event_and_blocks_commands() {
        let mut params = SimParams::for_testbed(TestbedKind::Drawer);
        params.reset_timeout = 2.0;
        let mut core = DaemonCore::simulated(params, AttachmentKind::Handle).unwrap();
        ok(&mut core, Command::InjectFault(InjectedFault::FreezePosition { reading: 300.0 }));
        ok(&mut core, Command::Reset);
        let mut out = Vec::new();
        core.advance(3.0, &mut out).unwrap();
        assert!(out.iter().any(|m| m.body == Body::Event(DaemonEvent::Fault { kind: FaultKind::ResetTimeout })));
        let (reply, _) = core.execute(5, Command::SetResistance { newtons: 1.0 });
        assert!(matches!(reply.body, Body::Nack(Nack { code: NackCode::Faulted, .. })));
        let out = ok(&mut core, Command::ClearFault);
        assert_eq!(out.len(), 1);
        ok(&mut core, Command::SetResistance { newtons: 1.0 });
    }

    #[test]
    fn advance_needs_lockstep() {
        let mut config = DaemonConfig::sim(TestbedKind::Door, AttachmentKind::Knob);
        config.clock = ClockMode::RealTime;
        let backend = open_backend(&config).unwrap();
        let mut core = DaemonCore::new(config, backend).unwrap();
        let (reply, _) = core.execute(1, Command::Advance { seconds: 0.1 });
        assert!(matches!(reply.body, Body::Nack(Nack { code: NackCode::Unsupported, .. })));
    }

    #[test]
    fn commands_need_control_role() {
        let mut core = drawer();
        let (reply, _) = core.handle_message(Some(Role::Telemetry), WireMessage::command(4, Command::Reset));
        assert!(matches!(reply.body, Body::Nack(Nack { code: NackCode::NotControl, .. })));
    }

    #[test]
    fn config_validation() {
        let text = r#"{"listen_address":"127.0.0.1:0","testbed":"Drawer","attachment":"Handle","telemetry_rate":500}"#;
        assert!(matches!(DaemonConfig::from_json(text), Err(ConfigError::TelemetryRate(_))));
        let text = r#"{"listen_address":"127.0.0.1:0","testbed":"Drawer","attachment":"Handle",
                       "clock":{"mode":"accelerated","factor":20},"sim":{"rng_seed":4}}"#;
        let c = DaemonConfig::from_json(text).unwrap();
        assert_eq!(c.clock, ClockMode::Accelerated { factor: 20.0 });
        assert_eq!(c.sim_params().unwrap().rng_seed, 4);
        let mut stub = c.clone();
        stub.backend = BackendKind::HardwareStub;
        assert!(open_backend(&stub).is_err());
    }
}

//! Trial executive: runs campaigns against a daemon link and a manipulator,
//! labels outcomes and drives the recorder.

pub mod link;
pub mod manipulator;

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::sync::mpsc::{Receiver, RecvTimeoutError, Sender, TryRecvError};
use std::time::Duration;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::dataset::{meta_for, CampaignStore, DatasetError, PhaseStamp, TrialRecord, TrialWriter};
use crate::model::{evaluate_success, expand_campaign, AttachmentKind, CampaignSpec, ModelError, TestbedKind, TrialLabel, TrialSpec};
use crate::protocol::{Command, DaemonEvent, FaultKind, Nack, Telemetry};
use crate::sim::median;
use link::{DaemonLink, Inbound, LinkError};
use manipulator::{ActionStage, Interaction, JointFeedback, Manipulator, ManipulatorGoal};

/// Hinge-to-handle distance used to express door angles as handle travel, mm.
pub const DOOR_HANDLE_RADIUS_MM: f64 = 300.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    Idle,
    Setup,
    SlackOut,
    ArmApproach,
    Grasp,
    Pull,
    Evaluate,
    Resetting,
    VerifyClosed,
    Done,
    Aborting,
    Fault,
}

/// Documented phase graph, not counting `X -> Fault` which is legal from every
/// phase other than Fault itself.
pub const TRANSITIONS: &[(Phase, Phase)] = &[
    (Phase::Idle, Phase::Setup),
    (Phase::Idle, Phase::Resetting),
    (Phase::Setup, Phase::SlackOut),
    (Phase::SlackOut, Phase::ArmApproach),
    (Phase::ArmApproach, Phase::Grasp),
    (Phase::Grasp, Phase::Pull),
    (Phase::Pull, Phase::Evaluate),
    (Phase::Evaluate, Phase::Resetting),
    (Phase::Resetting, Phase::Resetting),
    (Phase::Resetting, Phase::VerifyClosed),
    (Phase::VerifyClosed, Phase::Resetting),
    (Phase::VerifyClosed, Phase::Done),
    (Phase::VerifyClosed, Phase::Idle),
    (Phase::Done, Phase::Idle),
    (Phase::Setup, Phase::Aborting),
    (Phase::SlackOut, Phase::Aborting),
    (Phase::ArmApproach, Phase::Aborting),
    (Phase::Grasp, Phase::Aborting),
    (Phase::Pull, Phase::Aborting),
    (Phase::Aborting, Phase::Resetting),
    (Phase::Fault, Phase::Resetting),
];

impl Phase {
    pub const ALL: [Phase; 12] = [
        Phase::Idle,
        Phase::Setup,
        Phase::SlackOut,
        Phase::ArmApproach,
        Phase::Grasp,
        Phase::Pull,
        Phase::Evaluate,
        Phase::Resetting,
        Phase::VerifyClosed,
        Phase::Done,
        Phase::Aborting,
        Phase::Fault,
    ];

    pub fn can_transition(self, to: Phase) -> bool {
        (to == Phase::Fault && self != Phase::Fault) || TRANSITIONS.contains(&(self, to))
    }

    /// Phases an operator abort applies to.
    pub fn abortable(self) -> bool {
        matches!(self, Phase::Setup | Phase::SlackOut | Phase::ArmApproach | Phase::Grasp | Phase::Pull)
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrchestratorConfig {
    /// Control period, testbed seconds.
    pub tick_s: f64,
    /// Extra Reset attempts after the first one fails.
    pub reset_retries: u32,
    pub slack_timeout_s: f64,
    /// How long to wait for a reset to report back.
    pub reset_wait_s: f64,
    pub verify_frames: usize,
    pub verify_timeout_s: f64,
    /// Upper bound on one manipulator action.
    pub action_timeout_s: f64,
    /// On Fault, recover and carry on with the next trial.
    pub auto_continue: bool,
    pub seed: u64,
}

impl Default for OrchestratorConfig {
    fn default() -> Self {
        OrchestratorConfig {
            tick_s: 0.01,
            reset_retries: 2,
            slack_timeout_s: 20.0,
            reset_wait_s: 30.0,
            verify_frames: 5,
            verify_timeout_s: 2.0,
            action_timeout_s: 30.0,
            auto_continue: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub success: usize,
    pub failure: usize,
    pub aborted: usize,
    pub error: usize,
}

impl LabelCounts {
    pub fn add(&mut self, label: TrialLabel) {
        match label {
            TrialLabel::Success => self.success += 1,
            TrialLabel::Failure => self.failure += 1,
            TrialLabel::Aborted => self.aborted += 1,
            TrialLabel::Error => self.error += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.success + self.failure + self.aborted + self.error
    }
}

/// Campaign progress as published to the gateway.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StatusSnapshot {
    pub campaign_id: String,
    /// 1-based index of the current (or last) trial.
    pub trial_index: usize,
    pub trial_count: usize,
    pub trial_id: Option<String>,
    pub phase: Option<Phase>,
    pub paused: bool,
    pub fault: Option<String>,
    pub counts: LabelCounts,
    pub resistance_override: Option<f64>,
    pub telemetry_gaps: u64,
}

/// Operator controls accepted through the gateway.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "control")]
pub enum Control {
    PauseAfterTrial,
    Resume,
    AbortCurrent,
    ManualReset,
    ResistanceOverride { newtons: f64 },
    ClearFault,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome")]
pub enum ControlReply {
    Accepted,
    Rejected {
        reason: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max: Option<f64>,
    },
}

impl ControlReply {
    fn reject(reason: impl Into<String>) -> Self {
        ControlReply::Rejected { reason: reason.into(), max: None }
    }
}

pub struct ControlRequest {
    pub control: Control,
    pub reply: Sender<ControlReply>,
}

/// Receives everything the executor publishes. Implementations must not block.
pub trait Monitor {
    fn status(&mut self, _status: &StatusSnapshot) {}
    fn telemetry(&mut self, _seq: u64, _telemetry: &Telemetry) {}
    fn feedback(&mut self, _feedback: &JointFeedback) {}
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub trial_id: String,
    pub grasp: String,
    pub attachment: AttachmentKind,
    pub resistance: f64,
    pub label: TrialLabel,
    pub fault: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialOutcome {
    pub record: Option<TrialRecord>,
    pub label: TrialLabel,
    pub fault: Option<String>,
    pub history: Vec<PhaseStamp>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub campaign_id: String,
    pub trials: Vec<TrialSummary>,
    /// Keyed by `"<grasp>@<resistance>"`.
    pub cells: BTreeMap<String, LabelCounts>,
    pub totals: LabelCounts,
    pub faults: usize,
    pub skipped: Vec<String>,
    pub halted: bool,
}

impl CampaignReport {
    pub fn cell_key(grasp: &str, resistance: f64) -> String {
        format!("{grasp}@{resistance}")
    }
}

#[derive(Debug, thiserror::Error)]
pub enum OrchestratorError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("campaign is for {campaign}, daemon serves {daemon}")]
    Mismatch { campaign: String, daemon: String },
    #[error(transparent)]
    Link(#[from] LinkError),
}

/// Why a trial left the normal path.
enum Break {
    Abort { label: TrialLabel, reason: String },
    Fault(String),
}

impl From<LinkError> for Break {
    fn from(e: LinkError) -> Self {
        Break::Fault(format!("daemon link: {e}"))
    }
}

type Observer<L, M> = Box<dyn FnMut(Phase, &mut L, &mut M)>;

struct Recording {
    trial_id: String,
    origin: f64,
    active: bool,
    writer: Option<TrialWriter>,
    trace: Vec<(f64, f64)>,
}

/// Single-threaded phase executor.
pub struct Orchestrator<L: DaemonLink, M: Manipulator> {
    link: L,
    arm: M,
    config: OrchestratorConfig,
    testbed: TestbedKind,
    attachment: AttachmentKind,
    channel_count: usize,
    phase: Phase,
    history: Vec<PhaseStamp>,
    illegal: Vec<(Phase, Phase)>,
    clock: f64,
    last_measured: Option<f64>,
    recent: VecDeque<f64>,
    events: VecDeque<DaemonEvent>,
    last_seq: Option<u64>,
    status: StatusSnapshot,
    monitor: Option<Box<dyn Monitor>>,
    controls: Option<Receiver<ControlRequest>>,
    observer: Option<Observer<L, M>>,
    abort_requested: Option<String>,
    reset_requested: bool,
    recover_requested: bool,
    recording: Option<Recording>,
    interacting: bool,
}

fn info_field<T: serde::de::DeserializeOwned>(link: &dyn DaemonLink, key: &str) -> Option<T> {
    link.info().get(key).and_then(|v| serde_json::from_value(v.clone()).ok())
}

impl<L: DaemonLink, M: Manipulator> Orchestrator<L, M> {
    pub fn new(link: L, arm: M, config: OrchestratorConfig) -> Result<Self, OrchestratorError> {
        let testbed: TestbedKind = info_field(&link, "testbed")
            .ok_or_else(|| LinkError::Protocol("daemon did not report its testbed".into()))?;
        let attachment: AttachmentKind = info_field(&link, "attachment")
            .ok_or_else(|| LinkError::Protocol("daemon did not report its attachment".into()))?;
        let channel_count = info_field(&link, "channel_count").unwrap_or(attachment.channel_count());
        Ok(Orchestrator {
            link,
            arm,
            config,
            testbed,
            attachment,
            channel_count,
            phase: Phase::Idle,
            history: Vec::new(),
            illegal: Vec::new(),
            clock: 0.0,
            last_measured: None,
            recent: VecDeque::new(),
            events: VecDeque::new(),
            last_seq: None,
            status: StatusSnapshot::default(),
            monitor: None,
            controls: None,
            observer: None,
            abort_requested: None,
            reset_requested: false,
            recover_requested: false,
            recording: None,
            interacting: false,
        })
    }

    pub fn set_monitor(&mut self, monitor: Box<dyn Monitor>) {
        self.monitor = Some(monitor);
    }

    pub fn set_controls(&mut self, controls: Receiver<ControlRequest>) {
        self.controls = Some(controls);
    }

    /// Called on every phase entry; used to inject faults in tests.
    pub fn set_observer(&mut self, f: impl FnMut(Phase, &mut L, &mut M) + 'static) {
        self.observer = Some(Box::new(f));
    }

    pub fn config_mut(&mut self) -> &mut OrchestratorConfig {
        &mut self.config
    }

    pub fn link(&self) -> &L {
        &self.link
    }

    pub fn link_mut(&mut self) -> &mut L {
        &mut self.link
    }

    pub fn arm_mut(&mut self) -> &mut M {
        &mut self.arm
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn testbed(&self) -> TestbedKind {
        self.testbed
    }

    pub fn status(&self) -> &StatusSnapshot {
        &self.status
    }

    /// Transitions attempted that are not in the documented graph.
    pub fn illegal_transitions(&self) -> &[(Phase, Phase)] {
        &self.illegal
    }

    fn publish(&mut self) {
        self.status.phase = Some(self.phase);
        if let Some(m) = self.monitor.as_mut() {
            m.status(&self.status);
        }
    }

    fn enter(&mut self, to: Phase) {
        if !self.phase.can_transition(to) {
            warn!("undocumented transition {} -> {}", self.phase, to);
            self.illegal.push((self.phase, to));
        }
        self.phase = to;
        self.history.push(PhaseStamp { phase: to.to_string(), t: self.clock });
        self.publish();
        if let Some(mut obs) = self.observer.take() {
            obs(to, &mut self.link, &mut self.arm);
            self.observer = Some(obs);
        }
    }

    fn absorb(&mut self) {
        for item in self.link.drain() {
            match item {
                Inbound::Telemetry { seq, telemetry } => self.on_frame(seq, telemetry),
                Inbound::Event(e) => self.events.push_back(e),
                Inbound::Status(_) => {}
            }
        }
    }

    fn on_frame(&mut self, seq: u64, tel: Telemetry) {
        if let Some(prev) = self.last_seq {
            if seq > prev + 1 {
                self.status.telemetry_gaps += seq - prev - 1;
            }
        }
        self.last_seq = Some(seq);
        let f = &tel.frame;
        self.clock = f.timestamp;
        self.last_measured = Some(f.opening_measured);
        self.recent.push_back(f.opening_measured);
        while self.recent.len() > self.config.verify_frames.max(1) {
            self.recent.pop_front();
        }
        if let Some(rec) = self.recording.as_mut() {
            if rec.active && tel.trial_id.as_deref() == Some(rec.trial_id.as_str()) {
                let t = f.timestamp - rec.origin;
                rec.trace.push((t, f.opening_measured));
                if let Some(w) = rec.writer.as_mut() {
                    w.append_frame(t, f);
                }
            }
        }
        if let Some(m) = self.monitor.as_mut() {
            m.telemetry(seq, &tel);
        }
    }

    fn cmd(&mut self, command: Command) -> Result<Result<(), Nack>, LinkError> {
        let r = self.link.request(command);
        self.absorb();
        r.map(|reply| reply.map(|_| ()))
    }

    fn tick(&mut self) -> Result<(), Break> {
        self.link.wait(self.config.tick_s)?;
        self.absorb();
        self.poll_controls();
        if let Some(ev) = self.events.iter().find(|e| matches!(e, DaemonEvent::Fault { kind } if *kind != FaultKind::ResetTimeout)) {
            return Err(Break::Fault(format!("daemon reported {ev:?}")));
        }
        Ok(())
    }

    fn take_event(&mut self, want: impl Fn(&DaemonEvent) -> bool) -> Option<DaemonEvent> {
        let i = self.events.iter().position(want)?;
        self.events.remove(i)
    }

    fn handle_mm(&self) -> f64 {
        let m = self.last_measured.unwrap_or(0.0);
        match self.testbed {
            TestbedKind::Drawer => m,
            TestbedKind::Door => m.to_radians() * DOOR_HANDLE_RADIUS_MM,
        }
    }

    fn poll_controls(&mut self) {
        loop {
            let req = match self.controls.as_ref().map(Receiver::try_recv) {
                Some(Ok(r)) => r,
                Some(Err(TryRecvError::Disconnected)) => {
                    self.controls = None;
                    return;
                }
                _ => return,
            };
            let reply = self.handle_control(req.control);
            let _ = req.reply.send(reply);
        }
    }

    fn handle_control(&mut self, control: Control) -> ControlReply {
        if self.phase == Phase::Fault {
            return match control {
                Control::ClearFault | Control::ManualReset => {
                    self.recover_requested = true;
                    ControlReply::Accepted
                }
                _ => ControlReply::reject(format!(
                    "orchestrator is in Fault ({}); only ClearFault and Reset are accepted",
                    self.status.fault.clone().unwrap_or_default()
                )),
            };
        }
        let reply = match control {
            Control::PauseAfterTrial => {
                self.status.paused = true;
                ControlReply::Accepted
            }
            Control::Resume => {
                self.status.paused = false;
                ControlReply::Accepted
            }
            Control::AbortCurrent if self.phase.abortable() => {
                self.abort_requested = Some("operator abort".into());
                ControlReply::Accepted
            }
            Control::AbortCurrent => ControlReply::reject(format!("nothing to abort in phase {}", self.phase)),
            Control::ManualReset if matches!(self.phase, Phase::Idle | Phase::Done) => {
                self.reset_requested = true;
                ControlReply::Accepted
            }
            Control::ManualReset => ControlReply::reject(format!("trial in progress (phase {})", self.phase)),
            Control::ResistanceOverride { newtons } => match self.testbed.validate_resistance(newtons) {
                Ok(v) => {
                    self.status.resistance_override = Some(v);
                    ControlReply::Accepted
                }
                Err(e) => ControlReply::Rejected { reason: e.to_string(), max: Some(self.testbed.max_resistance()) },
            },
            Control::ClearFault => ControlReply::reject("no active fault"),
        };
        self.publish();
        reply
    }

    fn wait_for_event(&mut self, timeout_s: f64, want: impl Fn(&DaemonEvent) -> bool) -> Result<Option<DaemonEvent>, Break> {
        let mut waited = 0.0;
        loop {
            if let Some(e) = self.take_event(&want) {
                return Ok(Some(e));
            }
            if waited >= timeout_s {
                return Ok(None);
            }
            self.tick()?;
            waited += self.config.tick_s;
        }
    }

    fn set_interaction(&mut self, interaction: Interaction) -> Result<(), Break> {
        let command = match interaction {
            Interaction::Free if !self.interacting => return Ok(()),
            Interaction::Free => Command::Interact { coupling: None, retain_grip: false },
            Interaction::Grip(c) => Command::Interact { coupling: Some(c), retain_grip: false },
            Interaction::Drive(c) => Command::Interact { coupling: Some(c), retain_grip: true },
        };
        let engaging = !matches!(command, Command::Interact { coupling: None, .. });
        match self.cmd(command)? {
            Ok(()) => {
                self.interacting = engaging;
                Ok(())
            }
            // Without a sim backend the arm acts on the testbed directly.
            Err(n) if n.code == crate::protocol::NackCode::Unsupported => Ok(()),
            Err(n) => Err(Break::Abort { label: TrialLabel::Error, reason: format!("Interact rejected: {}", n.message) }),
        }
    }

    fn checked(&mut self, command: Command) -> Result<(), Break> {
        let name = command.name();
        match self.cmd(command)? {
            Ok(()) => Ok(()),
            Err(n) => Err(Break::Abort { label: TrialLabel::Error, reason: format!("{name} rejected: {:?} {}", n.code, n.message) }),
        }
    }

    fn check_abort(&mut self) -> Result<(), Break> {
        match self.abort_requested.take() {
            Some(reason) => Err(Break::Abort { label: TrialLabel::Aborted, reason }),
            None => Ok(()),
        }
    }

    /// Forward part of a trial, Setup through Pull.
    fn forward(&mut self, spec: &TrialSpec, resistance: f64) -> Result<(), Break> {
        self.enter(Phase::Setup);
        self.checked(Command::StartStream)?;
        self.checked(Command::SetResistance { newtons: resistance })?;
        self.check_abort()?;

        self.enter(Phase::SlackOut);
        self.checked(Command::ReleaseSlack)?;
        if self.wait_for_event(self.config.slack_timeout_s, |e| *e == DaemonEvent::SlackReleased)?.is_none() {
            return Err(Break::Abort { label: TrialLabel::Error, reason: "slack release timed out".into() });
        }
        self.check_abort()?;

        let metadata = json!({ "spec": spec, "seed": self.config.seed });
        self.checked(Command::StartRecord { trial_id: spec.trial_id.clone(), metadata })?;
        if let Some(rec) = self.recording.as_mut() {
            rec.origin = self.clock;
            rec.active = true;
        }

        self.enter(Phase::ArmApproach);
        let goal = ManipulatorGoal { grasp: spec.grasp.clone(), attachment: spec.attachment, testbed: spec.testbed };
        if let Err(reason) = self.arm.start(goal, self.clock) {
            return Err(Break::Abort { label: TrialLabel::Aborted, reason: format!("manipulator rejected goal: {reason}") });
        }
        let mut elapsed = 0.0;
        loop {
            self.check_abort().inspect_err(|_| self.arm.cancel("operator abort"))?;
            let step = self.arm.step(self.clock, self.handle_mm());
            let phase = match step.stage {
                ActionStage::Approach => Phase::ArmApproach,
                ActionStage::Grasp => Phase::Grasp,
                ActionStage::Pull | ActionStage::Retreat => Phase::Pull,
            };
            while self.phase != phase {
                let next = match self.phase {
                    Phase::ArmApproach => Phase::Grasp,
                    _ => Phase::Pull,
                };
                self.enter(next);
            }
            if let Some(rec) = self.recording.as_mut() {
                let t = step.feedback.t - rec.origin;
                if let Some(w) = rec.writer.as_mut() {
                    w.append_manipulator(crate::dataset::ManipulatorRow { t, q: step.feedback.q.clone(), qd: step.feedback.qd.clone() });
                }
            }
            if let Some(m) = self.monitor.as_mut() {
                m.feedback(&step.feedback);
            }
            if let Some(result) = step.result {
                self.set_interaction(Interaction::Free)?;
                if result.completed {
                    return Ok(());
                }
                let reason = result.abort_reason.unwrap_or_else(|| "manipulator aborted".into());
                return Err(Break::Abort { label: TrialLabel::Aborted, reason });
            }
            self.set_interaction(step.interaction)?;
            self.tick()?;
            elapsed += self.config.tick_s;
            if elapsed > self.config.action_timeout_s {
                self.arm.cancel("action timeout");
                return Err(Break::Abort { label: TrialLabel::Error, reason: "manipulator action timed out".into() });
            }
        }
    }

    fn stop_recording(&mut self) -> Result<Result<(), Nack>, LinkError> {
        let was_active = self.recording.as_ref().is_some_and(|r| r.active);
        let r = if was_active { self.cmd(Command::StopRecord) } else { Ok(Ok(())) };
        if let Some(rec) = self.recording.as_mut() {
            rec.active = false;
            if let Some(w) = rec.writer.as_mut() {
                w.close_streams();
            }
        }
        r
    }

    /// Resetting -> VerifyClosed with the retry budget. Ends in VerifyClosed
    /// with the testbed verified closed, or returns the fault.
    fn reset_and_verify(&mut self) -> Result<(), Break> {
        let mut failures = 0u32;
        loop {
            let attempt = self.reset_once()?;
            match attempt {
                Ok(()) => return Ok(()),
                Err(why) => {
                    failures += 1;
                    warn!("reset attempt {failures} failed: {why}");
                    if failures > self.config.reset_retries {
                        return Err(Break::Fault(format!("reset failed after {} retries: {why}", self.config.reset_retries)));
                    }
                    self.enter(Phase::Resetting);
                }
            }
        }
    }

    fn reset_once(&mut self) -> Result<Result<(), String>, Break> {
        self.events.retain(|e| !matches!(e, DaemonEvent::ResetComplete | DaemonEvent::Fault { kind: FaultKind::ResetTimeout }));
        // The closed check needs telemetry; a fault may have hit before Setup started it.
        if let Err(n) = self.cmd(Command::StartStream)? {
            return Ok(Err(format!("StartStream rejected: {:?} {}", n.code, n.message)));
        }
        if let Err(n) = self.cmd(Command::Reset)? {
            return Ok(Err(format!("Reset rejected: {:?} {}", n.code, n.message)));
        }
        let ev = self.wait_for_event(self.config.reset_wait_s, |e| {
            matches!(e, DaemonEvent::ResetComplete | DaemonEvent::Fault { kind: FaultKind::ResetTimeout })
        })?;
        match ev {
            Some(DaemonEvent::ResetComplete) => {}
            Some(_) => return Ok(Err("daemon reported ResetTimeout".into())),
            None => return Ok(Err("no reset report in time".into())),
        }
        self.enter(Phase::VerifyClosed);
        self.recent.clear();
        let mut waited = 0.0;
        while self.recent.len() < self.config.verify_frames && waited < self.config.verify_timeout_s {
            self.tick()?;
            waited += self.config.tick_s;
        }
        if self.recent.len() < self.config.verify_frames {
            return Ok(Err("no telemetry to verify closure".into()));
        }
        let m = median(self.recent.iter().copied());
        if m <= self.testbed.closed_tolerance() {
            Ok(Ok(()))
        } else {
            Ok(Err(format!("measured opening {m} above tolerance after reset")))
        }
    }

    fn enter_fault(&mut self, reason: String) {
        warn!("fault: {reason}");
        self.status.fault = Some(reason);
        self.enter(Phase::Fault);
        self.arm.cancel("fault");
        // Best effort: leave nothing engaged.
        let _ = self.link.request(Command::Interact { coupling: None, retain_grip: false });
        let _ = self.link.request(Command::Abort);
        self.interacting = false;
        let _ = self.stop_recording();
        self.absorb();
    }

    /// Runs one trial through the phase graph. Must start in Idle.
    pub fn run_trial(&mut self, spec: &TrialSpec, store: Option<&mut CampaignStore>) -> Result<TrialOutcome, OrchestratorError> {
        if self.phase != Phase::Idle {
            return Err(LinkError::Protocol(format!("run_trial called in phase {}", self.phase)).into());
        }
        spec.validate()?;
        if spec.testbed != self.testbed || spec.attachment != self.attachment {
            return Err(OrchestratorError::Mismatch {
                campaign: format!("{} {}", spec.testbed, spec.attachment),
                daemon: format!("{} {}", self.testbed, self.attachment),
            });
        }
        self.history.clear();
        self.events.clear();
        self.abort_requested = None;
        self.status.trial_id = Some(spec.trial_id.clone());
        let resistance = self.status.resistance_override.take().unwrap_or(spec.resistance);
        let mut spec = spec.clone();
        spec.resistance = resistance;
        let writer = match store.as_ref() {
            Some(s) => Some(s.open_trial(&spec.trial_id, self.channel_count, self.arm.joint_count())?),
            None => None,
        };
        self.recording = Some(Recording { trial_id: spec.trial_id.clone(), origin: self.clock, active: false, writer, trace: Vec::new() });
        let start_clock = self.clock;

        let mut label_override: Option<(TrialLabel, String)> = None;
        let mut fault: Option<String> = None;

        match self.forward(&spec, resistance) {
            Ok(()) => {
                self.enter(Phase::Evaluate);
                match self.stop_recording() {
                    Ok(Ok(())) => {}
                    Ok(Err(n)) => label_override = Some((TrialLabel::Error, format!("StopRecord rejected: {}", n.message))),
                    Err(e) => fault = Some(format!("daemon link: {e}")),
                }
                if fault.is_none() {
                    self.enter(Phase::Resetting);
                }
            }
            Err(Break::Abort { label, reason }) => {
                info!("trial {} aborting: {reason}", spec.trial_id);
                label_override = Some((label, reason));
                self.enter(Phase::Aborting);
                self.arm.cancel("trial aborted");
                let released = self.cmd(Command::Interact { coupling: None, retain_grip: false });
                self.interacting = false;
                match released.and_then(|_| self.cmd(Command::Abort)) {
                    Ok(Ok(())) => match self.stop_recording() {
                        Ok(_) => self.enter(Phase::Resetting),
                        Err(e) => fault = Some(format!("daemon link: {e}")),
                    },
                    Ok(Err(n)) => fault = Some(format!("Abort rejected: {}", n.message)),
                    Err(e) => fault = Some(format!("daemon link: {e}")),
                }
            }
            Err(Break::Fault(reason)) => fault = Some(reason),
        }

        if fault.is_none() {
            match self.reset_and_verify() {
                Ok(()) => {
                    if label_override.is_none() {
                        self.enter(Phase::Done);
                    }
                    self.enter(Phase::Idle);
                }
                Err(Break::Fault(reason)) | Err(Break::Abort { reason, .. }) => fault = Some(reason),
            }
        }
        if let Some(reason) = &fault {
            self.enter_fault(reason.clone());
        }

        let rec = self.recording.take().expect("recording set at trial start");
        let terminated_normally = label_override.is_none() && fault.is_none();
        let mut result = evaluate_success(&rec.trace, &spec, terminated_normally);
        if rec.trace.is_empty() {
            result.peak_opening = 0.0;
        }
        let reason = if let Some(f) = &fault {
            result.label = TrialLabel::Error;
            Some(format!("fault: {f}"))
        } else if let Some((label, reason)) = label_override {
            result.label = label;
            Some(reason)
        } else {
            None
        };
        let history = self.history.clone();
        let record = match rec.writer {
            Some(w) => {
                let mut meta = meta_for(&self.status.campaign_id, &spec, self.config.seed);
                let goal = ManipulatorGoal { grasp: spec.grasp.clone(), attachment: spec.attachment, testbed: spec.testbed };
                meta.grasp_pose = self.arm.grasp_pose(&goal).unwrap_or([0.0; 6]);
                meta.result = result;
                meta.reason = reason;
                meta.origin_clock = rec.origin;
                meta.end_clock = self.clock.max(start_clock);
                meta.phase_history = history.clone();
                let record = w.finalize(meta)?;
                if let Some(s) = store {
                    s.commit(&record)?;
                }
                Some(record)
            }
            None => None,
        };
        let label = record.as_ref().map_or(result.label, |r| r.meta.result.label);
        self.status.counts.add(label);
        self.publish();
        Ok(TrialOutcome { record, label, fault, history })
    }

    /// Fault -> Resetting -> VerifyClosed -> Idle.
    pub fn recover(&mut self) -> Result<(), String> {
        if self.phase != Phase::Fault {
            return Err(format!("recover called in phase {}", self.phase));
        }
        self.recover_requested = false;
        self.history.clear();
        self.enter(Phase::Resetting);
        let result = (|| -> Result<(), Break> {
            match self.cmd(Command::ClearFault)? {
                Ok(()) => {}
                Err(n) => return Err(Break::Fault(format!("ClearFault rejected: {}", n.message))),
            }
            self.events.clear();
            self.reset_and_verify()
        })();
        match result {
            Ok(()) => {
                self.status.fault = None;
                self.enter(Phase::Idle);
                Ok(())
            }
            Err(Break::Fault(r)) | Err(Break::Abort { reason: r, .. }) => {
                self.enter_fault(r.clone());
                Err(r)
            }
        }
    }

    /// Operator-requested reset between trials: Idle -> Resetting -> VerifyClosed -> Idle.
    pub fn manual_reset(&mut self) -> Result<(), String> {
        self.reset_requested = false;
        if self.phase != Phase::Idle {
            return Err(format!("manual reset in phase {}", self.phase));
        }
        self.enter(Phase::Resetting);
        match self.reset_and_verify() {
            Ok(()) => {
                self.enter(Phase::Idle);
                Ok(())
            }
            Err(Break::Fault(r)) | Err(Break::Abort { reason: r, .. }) => {
                self.enter_fault(r.clone());
                Err(r)
            }
        }
    }

    /// Blocks on operator controls while paused or faulted. Returns false if
    /// the campaign should halt.
    fn wait_for_operator(&mut self) -> bool {
        loop {
            if self.reset_requested && self.phase == Phase::Idle {
                let _ = self.manual_reset();
                continue;
            }
            if self.recover_requested && self.phase == Phase::Fault {
                let _ = self.recover();
                continue;
            }
            if self.phase == Phase::Idle && !self.status.paused {
                return true;
            }
            let Some(rx) = self.controls.as_ref() else { return false };
            match rx.recv_timeout(Duration::from_millis(50)) {
                Ok(req) => {
                    let reply = self.handle_control(req.control);
                    let _ = req.reply.send(reply);
                }
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => {
                    self.controls = None;
                    return false;
                }
            }
        }
    }

    /// Runs every trial of the campaign in order.
    pub fn run_campaign(&mut self, spec: &CampaignSpec, mut store: Option<&mut CampaignStore>) -> Result<CampaignReport, OrchestratorError> {
        let trials = expand_campaign(spec)?;
        if spec.testbed != self.testbed {
            return Err(OrchestratorError::Mismatch { campaign: spec.testbed.to_string(), daemon: self.testbed.to_string() });
        }
        self.status.campaign_id = spec.id.clone();
        self.status.trial_count = trials.len();
        self.status.counts = LabelCounts::default();
        let mut report = CampaignReport { campaign_id: spec.id.clone(), ..Default::default() };
        for (i, trial) in trials.iter().enumerate() {
            self.poll_controls();
            if !self.wait_for_operator() {
                report.halted = true;
            }
            if report.halted {
                for t in &trials[i..] {
                    report.skipped.push(t.trial_id.clone());
                    if let Some(s) = store.as_deref_mut() {
                        s.annotate_skipped(&t.trial_id, "campaign halted")?;
                    }
                }
                break;
            }
            self.status.trial_index = i + 1;
            let outcome = self.run_trial(trial, store.as_deref_mut())?;
            let summary = TrialSummary {
                trial_id: trial.trial_id.clone(),
                grasp: trial.grasp.clone(),
                attachment: trial.attachment,
                resistance: trial.resistance,
                label: outcome.label,
                fault: outcome.fault.clone(),
            };
            report.cells.entry(CampaignReport::cell_key(&trial.grasp, trial.resistance)).or_default().add(outcome.label);
            report.totals.add(outcome.label);
            report.trials.push(summary);
            if outcome.fault.is_some() {
                report.faults += 1;
                if self.config.auto_continue {
                    let _ = self.link.reconnect();
                    if let Err(e) = self.recover() {
                        warn!("recovery failed: {e}");
                    }
                }
                if self.phase == Phase::Fault && self.controls.is_none() {
                    report.halted = true;
                }
            }
        }
        self.status.trial_id = None;
        self.publish();
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fault_reachable_from_everywhere_but_itself() {
        for p in Phase::ALL {
            assert_eq!(p.can_transition(Phase::Fault), p != Phase::Fault);
        }
    }

    #[test]
    fn done_only_after_verify() {
        let into_done: Vec<_> = TRANSITIONS.iter().filter(|(_, to)| *to == Phase::Done).collect();
        assert_eq!(into_done, vec![&(Phase::VerifyClosed, Phase::Done)]);
        let into_verify: Vec<_> = TRANSITIONS.iter().filter(|(_, to)| *to == Phase::VerifyClosed).collect();
        assert_eq!(into_verify, vec![&(Phase::Resetting, Phase::VerifyClosed)]);
    }

    #[test]
    fn label_counts_total() {
        let mut c = LabelCounts::default();
        for l in [TrialLabel::Success, TrialLabel::Failure, TrialLabel::Error, TrialLabel::Success] {
            c.add(l);
        }
        assert_eq!((c.success, c.total()), (2, 4));
    }
}

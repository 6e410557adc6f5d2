//! Fixed-step physics and sensor emulation of the door and drawer testbeds.
//!
//! The drawer is a 1-D mass on slides with Coulomb and viscous friction plus a
//! disc brake whose force wanders around its setting. The door is a rigid panel
//! about its hinge, held shut by electromagnets that only act while the gap is
//! still closed. Both close through a string-and-spool reset motor that must
//! unwind slack before a pull, so the puller only feels brake and friction.

pub mod grip;
pub mod sensors;

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{PullAttachment, TestbedKind};
use grip::{ArmCoupling, GripContact, SlipParams};
use sensors::{channel_forces, SensorParams};

/// Largest accepted integration step, seconds.
pub const MAX_DT: f64 = 0.01;
/// Internal step used by the daemon and orchestrator, seconds.
pub const DEFAULT_DT: f64 = 0.001;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("time step {0} s outside (0, {MAX_DT}]")]
    InvalidStep(f64),
    #[error("applied force is not finite")]
    NonFiniteForce,
    #[error("resistance {value} N out of range (max {max} N)")]
    OutOfRange { value: f64, max: f64 },
    #[error("testbed busy: reset motor is {0:?}")]
    NotIdle(ResetMotor),
    #[error("a pull is active")]
    PullActive,
    #[error("testbed dislodged; clear the fault first")]
    Dislodged,
    #[error("invalid parameters: {0}")]
    Params(String),
    #[error("invalid grip: {0}")]
    Grip(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ResetMotor {
    Idle,
    WindingIn,
    UnwindingSlack,
}

impl ResetMotor {
    pub fn as_str(self) -> &'static str {
        match self {
            ResetMotor::Idle => "Idle",
            ResetMotor::WindingIn => "WindingIn",
            ResetMotor::UnwindingSlack => "UnwindingSlack",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "Idle" => Some(ResetMotor::Idle),
            "WindingIn" => Some(ResetMotor::WindingIn),
            "UnwindingSlack" => Some(ResetMotor::UnwindingSlack),
            _ => None,
        }
    }
}

/// Instantaneous physical state of a testbed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestbedState {
    /// Degrees (door) or millimetres (drawer).
    pub opening: f64,
    /// Testbed units per second.
    pub velocity: f64,
    pub resistance_setting: f64,
    pub brake_or_magnet_engaged: bool,
    pub reset_motor: ResetMotor,
    /// String length beyond taut, mm.
    pub slack_remaining: f64,
    pub dislodged: bool,
    pub clock: f64,
}

/// Telemetry flag bits.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FrameFlags(pub u8);

impl FrameFlags {
    pub const DISLODGED: u8 = 1;
    pub const AT_HARD_STOP: u8 = 1 << 1;
    pub const RESET_FAULT: u8 = 1 << 2;

    pub fn contains(self, bit: u8) -> bool {
        self.0 & bit != 0
    }

    pub fn set(&mut self, bit: u8, on: bool) {
        if on {
            self.0 |= bit;
        } else {
            self.0 &= !bit;
        }
    }
}

/// Simulator-only ground truth attached to telemetry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub opening: f64,
    pub velocity: f64,
}

/// One telemetry sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorFrame {
    pub timestamp: f64,
    pub seq: u64,
    pub opening_measured: f64,
    pub fsr_counts: Vec<u16>,
    pub resistance_setting: f64,
    pub reset_motor: ResetMotor,
    pub flags: FrameFlags,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<GroundTruth>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SimEvent {
    ResetComplete,
    SlackReleased,
    ResetTimeout,
    Dislodged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    pub testbed: TestbedKind,
    /// Opening range in testbed units.
    pub travel: f64,
    pub drawer_mass: f64,
    pub door_inertia: f64,
    /// Hinge-to-handle distance, m.
    pub handle_radius: f64,
    /// Hinge-to-string-anchor distance, m. Converts door angle into string length.
    pub door_width: f64,
    /// N for the drawer, N*m for the door.
    pub coulomb_friction: f64,
    /// N*s/m for the drawer, N*m*s/rad for the door.
    pub viscous_damping: f64,
    pub brake_noise_amplitude: f64,
    pub brake_noise_bandwidth: f64,
    pub magnet_release_angle: f64,
    /// Closing speed while winding in, testbed units per second.
    pub reset_speed: f64,
    /// String pay-out speed while unwinding, mm/s.
    pub unwind_speed: f64,
    pub slack_target: f64,
    pub closed_tolerance: f64,
    pub reset_timeout: f64,
    /// Extra winding after the closed reading, seats the drawer/door on its stop.
    pub seat_time: f64,
    /// Samples in the median filter used for the closed check.
    pub closed_window: usize,
    pub dislodge_threshold: f64,
    pub sensors: SensorParams,
    pub slip: SlipParams,
    pub rng_seed: u64,
}

impl SimParams {
    pub fn for_testbed(testbed: TestbedKind) -> Self {
        let (coulomb, viscous, reset_speed) = match testbed {
            TestbedKind::Drawer => (1.0, 2.0, 100.0),
            TestbedKind::Door => (0.05, 0.02, 30.0),
        };
        SimParams {
            testbed,
            travel: testbed.opening_range(),
            drawer_mass: 2.0,
            // 1/3 * 2 kg * (0.35 m)^2
            door_inertia: 0.082,
            handle_radius: 0.3,
            door_width: 0.35,
            coulomb_friction: coulomb,
            viscous_damping: viscous,
            brake_noise_amplitude: 0.1,
            brake_noise_bandwidth: 2.0,
            magnet_release_angle: 1.0,
            reset_speed,
            unwind_speed: 100.0,
            slack_target: 50.0,
            closed_tolerance: testbed.closed_tolerance(),
            reset_timeout: 15.0,
            seat_time: 0.1,
            closed_window: 5,
            dislodge_threshold: 60.0,
            sensors: SensorParams::default(),
            slip: SlipParams::default(),
            rng_seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng_seed = seed;
        self
    }

    /// Parses a JSON config; omitted fields take the defaults for its `testbed`.
    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| SimError::Params(e.to_string()))?;
        Self::from_value(value)
    }

    pub fn from_value(value: serde_json::Value) -> Result<Self, SimError> {
        let testbed: TestbedKind = value
            .get("testbed")
            .cloned()
            .ok_or_else(|| SimError::Params("missing field `testbed`".into()))
            .and_then(|v| serde_json::from_value(v).map_err(|e| SimError::Params(e.to_string())))?;
        let mut base = serde_json::to_value(Self::for_testbed(testbed)).expect("params serialize");
        merge(&mut base, value);
        let params: SimParams = serde_json::from_value(base).map_err(|e| SimError::Params(e.to_string()))?;
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let err = |m: String| Err(SimError::Params(m));
        let positive = [
            ("travel", self.travel),
            ("drawer_mass", self.drawer_mass),
            ("door_inertia", self.door_inertia),
            ("handle_radius", self.handle_radius),
            ("door_width", self.door_width),
            ("brake_noise_bandwidth", self.brake_noise_bandwidth),
            ("magnet_release_angle", self.magnet_release_angle),
            ("reset_speed", self.reset_speed),
            ("unwind_speed", self.unwind_speed),
            ("slack_target", self.slack_target),
            ("closed_tolerance", self.closed_tolerance),
            ("reset_timeout", self.reset_timeout),
            ("dislodge_threshold", self.dislodge_threshold),
            ("slip.slip_rate_mm_s", self.slip.slip_rate_mm_s),
            ("slip.decay_period_s", self.slip.decay_period_s),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return err(format!("{name} must be positive, got {v}"));
            }
        }
        // Friction and damping may be zero, which the closed-form checks rely on.
        for (name, v) in [
            ("coulomb_friction", self.coulomb_friction),
            ("viscous_damping", self.viscous_damping),
            ("seat_time", self.seat_time),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return err(format!("{name} must be non-negative, got {v}"));
            }
        }
        if !(0.0..=0.2).contains(&self.brake_noise_amplitude) {
            return err(format!("brake_noise_amplitude {} outside [0, 0.2]", self.brake_noise_amplitude));
        }
        if !(self.slip.decay_factor > 0.0 && self.slip.decay_factor <= 1.0) {
            return err(format!("slip.decay_factor {} outside (0, 1]", self.slip.decay_factor));
        }
        if self.closed_window == 0 {
            return err("closed_window must be at least 1".into());
        }
        self.sensors.validate().map_err(SimError::Params)
    }
}

fn merge(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum UnwindPurpose {
    Reset,
    Release,
}

#[derive(Debug, Clone)]
struct MotorProgress {
    elapsed: f64,
    seated_for: Option<f64>,
    slack_goal: f64,
    purpose: UnwindPurpose,
}

/// Simulated door or drawer. Owns its clock; a single owner advances it.
#[derive(Debug, Clone)]
pub struct Testbed {
    params: SimParams,
    attachment: PullAttachment,
    state: TestbedState,
    brake_z: f64,
    rng_brake: ChaCha8Rng,
    rng_control: ChaCha8Rng,
    rng_sense: ChaCha8Rng,
    seq: u64,
    motor: MotorProgress,
    window: VecDeque<f64>,
    coupling: Option<ArmCoupling>,
    frozen_position: Option<f64>,
    reset_fault: bool,
    at_hard_stop: bool,
    slipping: bool,
    last_pull: f64,
    events: Vec<SimEvent>,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

impl Testbed {
    pub fn new(params: SimParams, attachment: PullAttachment) -> Result<Self, SimError> {
        params.validate()?;
        let seed = params.rng_seed;
        let slack = params.slack_target;
        Ok(Testbed {
            attachment,
            state: TestbedState {
                opening: 0.0,
                velocity: 0.0,
                resistance_setting: 0.0,
                brake_or_magnet_engaged: false,
                reset_motor: ResetMotor::Idle,
                slack_remaining: slack,
                dislodged: false,
                clock: 0.0,
            },
            brake_z: 0.0,
            rng_brake: stream(seed, 1),
            rng_control: stream(seed, 2),
            rng_sense: stream(seed, 3),
            seq: 0,
            motor: MotorProgress { elapsed: 0.0, seated_for: None, slack_goal: 0.0, purpose: UnwindPurpose::Reset },
            window: VecDeque::with_capacity(params.closed_window),
            coupling: None,
            frozen_position: None,
            reset_fault: false,
            at_hard_stop: true,
            slipping: false,
            last_pull: 0.0,
            events: Vec::new(),
            params,
        })
    }

    pub fn params(&self) -> &SimParams {
        &self.params
    }

    pub fn attachment(&self) -> &PullAttachment {
        &self.attachment
    }

    pub fn kind(&self) -> TestbedKind {
        self.params.testbed
    }

    pub fn state(&self) -> &TestbedState {
        &self.state
    }

    /// Places the testbed at an opening, at rest. Test and scenario setup only.
    pub fn set_opening(&mut self, opening: f64) {
        self.state.opening = opening.clamp(0.0, self.params.travel);
        self.state.velocity = 0.0;
    }

    pub fn set_slack(&mut self, slack_mm: f64) {
        self.state.slack_remaining = slack_mm.max(0.0);
    }

    pub fn coupling(&self) -> Option<&ArmCoupling> {
        self.coupling.as_ref()
    }

    pub fn grip(&self) -> Option<&GripContact> {
        self.coupling.as_ref().and_then(|c| c.grip.as_ref())
    }

    pub fn is_slipping(&self) -> bool {
        self.slipping
    }

    /// Pull transmitted to the testbed in the last step, N.
    pub fn last_pull(&self) -> f64 {
        self.last_pull
    }

    pub fn reset_fault(&self) -> bool {
        self.reset_fault
    }

    pub fn drain_events(&mut self) -> Vec<SimEvent> {
        std::mem::take(&mut self.events)
    }

    /// Freezes (or unfreezes) the position sensor at a fixed reading.
    pub fn freeze_position_sensor(&mut self, reading: Option<f64>) {
        self.frozen_position = reading;
    }

    pub fn set_resistance(&mut self, value: f64) -> Result<(), SimError> {
        let max = self.kind().max_resistance();
        if !(0.0..=max).contains(&value) {
            return Err(SimError::OutOfRange { value, max });
        }
        if self.state.reset_motor != ResetMotor::Idle {
            return Err(SimError::NotIdle(self.state.reset_motor));
        }
        if self.state.dislodged {
            return Err(SimError::Dislodged);
        }
        self.state.resistance_setting = value;
        self.state.brake_or_magnet_engaged = value > 0.0;
        Ok(())
    }

    /// Starts closing: wind in until the position sensor reads closed, then
    /// unwind `slack_target` of string. Brake and magnets are released.
    pub fn begin_reset(&mut self) -> Result<(), SimError> {
        if self.state.dislodged {
            return Err(SimError::Dislodged);
        }
        if self.grip().is_some() {
            return Err(SimError::PullActive);
        }
        self.coupling = None;
        self.state.brake_or_magnet_engaged = false;
        self.state.reset_motor = ResetMotor::WindingIn;
        self.state.slack_remaining = 0.0;
        self.reset_fault = false;
        self.window.clear();
        self.motor = MotorProgress {
            elapsed: 0.0,
            seated_for: None,
            slack_goal: self.params.slack_target,
            purpose: UnwindPurpose::Reset,
        };
        Ok(())
    }

    /// Pays out enough string for the full travel plus `slack_target`.
    pub fn release_slack(&mut self) -> Result<(), SimError> {
        if self.state.dislodged {
            return Err(SimError::Dislodged);
        }
        if self.state.reset_motor != ResetMotor::Idle {
            return Err(SimError::NotIdle(self.state.reset_motor));
        }
        let needed = self.string_mm(self.params.travel - self.state.opening) + self.params.slack_target;
        self.motor = MotorProgress {
            elapsed: 0.0,
            seated_for: None,
            slack_goal: needed.max(self.state.slack_remaining),
            purpose: UnwindPurpose::Release,
        };
        self.state.reset_motor = ResetMotor::UnwindingSlack;
        Ok(())
    }

    /// Stops the reset motor, drops any contact and releases brake/magnets.
    pub fn abort(&mut self) {
        self.state.reset_motor = ResetMotor::Idle;
        self.state.brake_or_magnet_engaged = false;
        self.coupling = None;
        self.slipping = false;
    }

    pub fn clear_fault(&mut self) {
        self.state.dislodged = false;
        self.reset_fault = false;
    }

    pub fn set_coupling(&mut self, coupling: Option<ArmCoupling>) -> Result<(), SimError> {
        if let Some(c) = &coupling {
            c.validate(&self.attachment).map_err(SimError::Grip)?;
        }
        self.coupling = coupling;
        Ok(())
    }

    /// Marks the testbed dislodged when more than the threshold is pushed into it.
    pub fn check_safety(&mut self, inward_force: f64) {
        if inward_force > self.params.dislodge_threshold && !self.state.dislodged {
            self.state.dislodged = true;
            self.events.push(SimEvent::Dislodged);
        }
    }

    /// Current brake (drawer) or magnet (door) force at the handle, N.
    pub fn resistive_setting_force(&self) -> f64 {
        if !self.state.brake_or_magnet_engaged {
            return 0.0;
        }
        match self.kind() {
            TestbedKind::Drawer => self.state.resistance_setting * (1.0 + self.brake_noise()),
            TestbedKind::Door => {
                if self.state.opening < self.params.magnet_release_angle {
                    self.state.resistance_setting
                } else {
                    0.0
                }
            }
        }
    }

    /// Current multiplicative brake deviation, within +-amplitude.
    pub fn brake_noise(&self) -> f64 {
        self.params.brake_noise_amplitude * self.brake_z.clamp(-1.0, 1.0)
    }

    fn advance_brake_noise(&mut self, dt: f64) {
        // Ornstein-Uhlenbeck process, i.e. white noise through a first-order
        // low-pass at the configured bandwidth. Stationary std 1/3 so the
        // +-1 clamp rarely binds.
        let tau = 1.0 / (std::f64::consts::TAU * self.params.brake_noise_bandwidth);
        let decay = (-dt / tau).exp();
        let n: f64 = self.rng_brake.sample(StandardNormal);
        self.brake_z = self.brake_z * decay + (1.0 - decay * decay).sqrt() * n / 3.0;
    }

    /// String length (mm) corresponding to an opening change.
    fn string_mm(&self, delta_opening: f64) -> f64 {
        match self.kind() {
            TestbedKind::Drawer => delta_opening,
            TestbedKind::Door => delta_opening.to_radians() * self.params.door_width * 1000.0,
        }
    }

    fn opening_from_string(&self, mm: f64) -> f64 {
        match self.kind() {
            TestbedKind::Drawer => mm,
            TestbedKind::Door => (mm / (self.params.door_width * 1000.0)).to_degrees(),
        }
    }

    /// Handle displacement along the pull direction, mm, and its rate.
    pub fn handle_position(&self) -> (f64, f64) {
        match self.kind() {
            TestbedKind::Drawer => (self.state.opening, self.state.velocity),
            TestbedKind::Door => {
                let k = self.params.handle_radius * 1000.0;
                (self.state.opening.to_radians() * k, self.state.velocity.to_radians() * k)
            }
        }
    }

    /// Advances by `dt` with an external pull (N, along the opening direction).
    pub fn step(&mut self, applied_pull: f64, dt: f64) -> Result<(), SimError> {
        if !(dt > 0.0 && dt <= MAX_DT) {
            return Err(SimError::InvalidStep(dt));
        }
        if !applied_pull.is_finite() {
            return Err(SimError::NonFiniteForce);
        }
        self.state.clock += dt;
        self.advance_brake_noise(dt);
        if self.state.dislodged {
            self.last_pull = 0.0;
            return Ok(());
        }
        self.last_pull = applied_pull;
        match self.state.reset_motor {
            ResetMotor::WindingIn => self.wind_in(dt),
            ResetMotor::UnwindingSlack => {
                self.integrate(applied_pull, dt);
                self.unwind(dt);
            }
            ResetMotor::Idle => self.integrate(applied_pull, dt),
        }
        Ok(())
    }

    /// Advances by `dt` with the pull produced by the current arm coupling.
    pub fn step_coupled(&mut self, dt: f64) -> Result<(), SimError> {
        if !(dt > 0.0 && dt <= MAX_DT) {
            return Err(SimError::InvalidStep(dt));
        }
        let Some(mut coupling) = self.coupling.take() else {
            self.slipping = false;
            return self.step(0.0, dt);
        };
        self.check_safety(coupling.inward_force);
        let (pos, vel) = self.handle_position();
        let demand = coupling.demand(pos, vel);
        let pull = match coupling.grip.as_mut() {
            Some(grip) => {
                let t = grip.transmit(&self.attachment, demand, dt, &self.params.slip);
                self.slipping = t.slipping;
                t.transmitted
            }
            None => {
                self.slipping = false;
                0.0
            }
        };
        coupling.target_mm += coupling.target_velocity * dt;
        self.coupling = Some(coupling);
        self.step(pull, dt)
    }

    /// Applies a grip and commanded pull for one step; returns the updated grip.
    pub fn apply_grip_and_pull(&mut self, grip: &GripContact, commanded_pull: f64, dt: f64) -> Result<GripContact, SimError> {
        grip.validate(&self.attachment).map_err(SimError::Grip)?;
        let mut grip = grip.clone();
        let t = grip.transmit(&self.attachment, commanded_pull, dt, &self.params.slip);
        self.slipping = t.slipping;
        self.step(t.transmitted, dt)?;
        Ok(grip)
    }

    fn integrate(&mut self, pull: f64, dt: f64) {
        let p = &self.params;
        let drawer = self.kind() == TestbedKind::Drawer;
        // Generalized coordinates: metres / radians.
        let (to_si, from_si) = if drawer { (1e-3, 1e3) } else { (std::f64::consts::PI / 180.0, 180.0 / std::f64::consts::PI) };
        let resist_setting = self.resistive_setting_force();
        let (inertia, drive, stiction) = if drawer {
            (p.drawer_mass, pull, resist_setting + p.coulomb_friction)
        } else {
            (p.door_inertia, pull * p.handle_radius, resist_setting * p.handle_radius + p.coulomb_friction)
        };
        let x = self.state.opening * to_si;
        let v = self.state.velocity * to_si;
        let a = if v == 0.0 {
            if drive.abs() <= stiction {
                0.0
            } else {
                (drive - stiction * drive.signum()) / inertia
            }
        } else {
            (drive - stiction * v.signum() - p.viscous_damping * v) / inertia
        };
        // Exact for constant acceleration over the step.
        let mut v_new = v + a * dt;
        let mut x_new = x + v * dt + 0.5 * a * dt * dt;
        if v != 0.0 && v_new * v < 0.0 {
            // Friction brought the body to rest inside the step.
            let t_stop = -v / a;
            x_new = x + 0.5 * v * t_stop;
            v_new = 0.0;
        }
        let old_opening = self.state.opening;
        let mut opening = x_new * from_si;
        let mut velocity = v_new * from_si;

        let slack_limit = old_opening + self.opening_from_string(self.state.slack_remaining);
        let upper = self.params.travel.min(slack_limit);
        self.at_hard_stop = false;
        if opening >= upper {
            opening = upper;
            if velocity > 0.0 {
                velocity = 0.0;
            }
            self.at_hard_stop = true;
        }
        if opening <= 0.0 {
            opening = 0.0;
            if velocity < 0.0 {
                velocity = 0.0;
            }
            self.at_hard_stop = true;
        }
        self.state.opening = opening;
        self.state.velocity = velocity;
        let consumed = self.string_mm(opening - old_opening);
        self.state.slack_remaining = (self.state.slack_remaining - consumed).max(0.0);
    }

    fn measured_for_control(&mut self) -> f64 {
        match self.frozen_position {
            Some(v) => v,
            None => {
                let truth = self.state.opening;
                self.params.sensors.measure_opening(self.kind(), truth, &mut self.rng_control)
            }
        }
    }

    /// Median-filtered closed check on the control sensor path.
    pub fn measured_closed(&self) -> bool {
        if self.window.len() < self.params.closed_window {
            return false;
        }
        median(self.window.iter().copied()) <= self.params.closed_tolerance
    }

    fn wind_in(&mut self, dt: f64) {
        self.motor.elapsed += dt;
        let old = self.state.opening;
        self.state.opening = (old - self.params.reset_speed * dt).max(0.0);
        self.state.velocity = if self.state.opening > 0.0 { -self.params.reset_speed } else { 0.0 };
        self.at_hard_stop = self.state.opening == 0.0;
        self.state.slack_remaining = 0.0;

        let m = self.measured_for_control();
        if self.window.len() == self.params.closed_window {
            self.window.pop_front();
        }
        self.window.push_back(m);

        match self.motor.seated_for {
            Some(ref mut t) => {
                *t += dt;
                if *t >= self.params.seat_time {
                    self.state.reset_motor = ResetMotor::UnwindingSlack;
                    self.state.velocity = 0.0;
                    return;
                }
            }
            None if self.measured_closed() => self.motor.seated_for = Some(0.0),
            None => {}
        }
        if self.motor.elapsed > self.params.reset_timeout {
            self.state.reset_motor = ResetMotor::Idle;
            self.state.velocity = 0.0;
            self.reset_fault = true;
            self.events.push(SimEvent::ResetTimeout);
        }
    }

    fn unwind(&mut self, dt: f64) {
        self.motor.elapsed += dt;
        self.state.slack_remaining += self.params.unwind_speed * dt;
        if self.state.slack_remaining >= self.motor.slack_goal {
            self.state.slack_remaining = self.motor.slack_goal;
            self.state.reset_motor = ResetMotor::Idle;
            self.events.push(match self.motor.purpose {
                UnwindPurpose::Reset => SimEvent::ResetComplete,
                UnwindPurpose::Release => SimEvent::SlackReleased,
            });
        }
    }

    fn flags(&self) -> FrameFlags {
        let mut f = FrameFlags::default();
        f.set(FrameFlags::DISLODGED, self.state.dislodged);
        f.set(FrameFlags::AT_HARD_STOP, self.at_hard_stop);
        f.set(FrameFlags::RESET_FAULT, self.reset_fault);
        f
    }

    /// Samples every sensor using the grip currently held by the arm.
    pub fn sense(&mut self) -> SensorFrame {
        let grip = self.grip().cloned();
        self.sense_with(grip.as_ref())
    }

    /// Samples every sensor with an explicit grip (or none).
    pub fn sense_with(&mut self, grip: Option<&GripContact>) -> SensorFrame {
        let sensors = &self.params.sensors;
        let opening_measured = match self.frozen_position {
            Some(v) => v,
            None => sensors.measure_opening(self.params.testbed, self.state.opening, &mut self.rng_sense),
        };
        let forces = channel_forces(&self.attachment, grip, sensors.spread_sigma_mm);
        let fsr_counts = forces.iter().map(|&f| sensors.fsr_counts(f, &mut self.rng_sense)).collect();
        self.seq += 1;
        SensorFrame {
            timestamp: self.state.clock,
            seq: self.seq,
            opening_measured,
            fsr_counts,
            resistance_setting: self.state.resistance_setting,
            reset_motor: self.state.reset_motor,
            flags: self.flags(),
            truth: Some(GroundTruth { opening: self.state.opening, velocity: self.state.velocity }),
        }
    }
}

pub(crate) fn median(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::grip::Contact;
    use super::*;
    use crate::model::HANDLE_RADIUS_MM;

    fn quiet(kind: TestbedKind) -> SimParams {
        let mut p = SimParams::for_testbed(kind);
        p.brake_noise_amplitude = 0.0;
        p.sensors = SensorParams::noise_free();
        p
    }

    fn drawer_free(p: SimParams) -> Testbed {
        let mut t = Testbed::new(p, PullAttachment::handle()).unwrap();
        t.set_slack(1000.0);
        t
    }

    #[test]
    fn constant_pull_matches_closed_form() {
        let mut p = quiet(TestbedKind::Drawer);
        p.coulomb_friction = 1.0;
        p.viscous_damping = 0.0;
        p.drawer_mass = 2.0;
        let mut t = drawer_free(p);
        for _ in 0..500 {
            t.step(5.0, 0.001).unwrap();
        }
        // x = 1/2 * (4 N / 2 kg) * 0.5^2 = 0.25 m
        let x = t.state().opening;
        assert!((x - 250.0).abs() / 250.0 < 1e-6, "{x}");
        assert!((t.state().velocity - 1000.0).abs() < 1e-6);
    }

    #[test]
    fn below_breakaway_stays_closed() {
        let mut t = drawer_free(quiet(TestbedKind::Drawer));
        t.set_resistance(25.0).unwrap();
        for _ in 0..2000 {
            t.step(10.0, 0.001).unwrap();
            assert_eq!(t.state().opening, 0.0);
        }
    }

    #[test]
    fn door_breakaway_inequality() {
        let mut p = quiet(TestbedKind::Door);
        p.coulomb_friction = 0.0;
        let mut door = Testbed::new(p.clone(), PullAttachment::knob()).unwrap();
        door.set_slack(1000.0);
        door.set_resistance(10.0).unwrap();
        for _ in 0..100 {
            door.step(10.5, 0.001).unwrap();
        }
        assert!(door.state().opening > 0.0);

        // 1 N of friction referred to the handle radius.
        p.coulomb_friction = 1.0 * p.handle_radius;
        let mut door = Testbed::new(p, PullAttachment::knob()).unwrap();
        door.set_slack(1000.0);
        door.set_resistance(10.0).unwrap();
        for _ in 0..100 {
            door.step(10.5, 0.001).unwrap();
        }
        assert_eq!(door.state().opening, 0.0);
    }

    #[test]
    fn magnet_releases_after_gap_opens() {
        let mut p = quiet(TestbedKind::Door);
        p.coulomb_friction = 0.0;
        p.viscous_damping = 0.0;
        let mut door = Testbed::new(p, PullAttachment::knob()).unwrap();
        door.set_slack(1000.0);
        door.set_resistance(10.0).unwrap();
        assert_eq!(door.resistive_setting_force(), 10.0);
        door.set_opening(2.0);
        assert_eq!(door.resistive_setting_force(), 0.0);
    }

    #[test]
    fn step_rejects_bad_input() {
        let mut t = drawer_free(quiet(TestbedKind::Drawer));
        assert_eq!(t.step(1.0, 0.0), Err(SimError::InvalidStep(0.0)));
        assert_eq!(t.step(1.0, 0.02), Err(SimError::InvalidStep(0.02)));
        assert_eq!(t.step(f64::NAN, 0.001), Err(SimError::NonFiniteForce));
    }

    #[test]
    fn resistance_bounds() {
        let mut drawer = drawer_free(quiet(TestbedKind::Drawer));
        drawer.set_resistance(25.0).unwrap();
        drawer.set_resistance(0.0).unwrap();
        let mut door = Testbed::new(quiet(TestbedKind::Door), PullAttachment::knob()).unwrap();
        assert_eq!(door.set_resistance(15.0), Err(SimError::OutOfRange { value: 15.0, max: 10.0 }));
        door.begin_reset().unwrap();
        assert_eq!(door.set_resistance(5.0), Err(SimError::NotIdle(ResetMotor::WindingIn)));
    }

    fn run_reset(t: &mut Testbed, limit: f64) -> Vec<(f64, SimEvent)> {
        let mut events = Vec::new();
        while t.state().clock < limit {
            t.step(0.0, 0.001).unwrap();
            for e in t.drain_events() {
                events.push((t.state().clock, e));
            }
            if t.state().reset_motor == ResetMotor::Idle {
                break;
            }
        }
        events
    }

    #[test]
    fn reset_from_300mm_follows_kinematics() {
        let mut t = Testbed::new(SimParams::for_testbed(TestbedKind::Drawer).with_seed(7), PullAttachment::handle()).unwrap();
        t.set_opening(300.0);
        t.set_resistance(25.0).unwrap();
        t.begin_reset().unwrap();
        assert!(!t.state().brake_or_magnet_engaged);
        let events = run_reset(&mut t, 20.0);
        assert_eq!(events.len(), 1);
        let (at, ev) = events[0];
        assert_eq!(ev, SimEvent::ResetComplete);
        // 300 mm / 100 mm/s + 0.1 s seat + 50 mm / 100 mm/s
        assert!((3.4..=3.7).contains(&at), "{at}");
        assert!(t.state().slack_remaining >= 50.0);
        assert_eq!(t.state().opening, 0.0);
    }

    #[test]
    fn closed_drawer_goes_straight_to_slack() {
        let mut t = Testbed::new(SimParams::for_testbed(TestbedKind::Drawer), PullAttachment::handle()).unwrap();
        t.begin_reset().unwrap();
        let events = run_reset(&mut t, 5.0);
        let (at, ev) = events[0];
        assert_eq!(ev, SimEvent::ResetComplete);
        assert!(at < 0.7, "{at}");
    }

    #[test]
    fn frozen_sensor_times_out() {
        let mut p = SimParams::for_testbed(TestbedKind::Drawer);
        p.reset_timeout = 5.0;
        let mut t = Testbed::new(p, PullAttachment::handle()).unwrap();
        t.set_opening(300.0);
        t.freeze_position_sensor(Some(300.0));
        t.begin_reset().unwrap();
        let events = run_reset(&mut t, 20.0);
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].1, SimEvent::ResetTimeout);
        assert!((events[0].0 - 5.0).abs() < 0.01);
        assert!(t.reset_fault());
        assert_eq!(t.sense().opening_measured, 300.0);
    }

    #[test]
    fn release_slack_allows_full_travel() {
        let mut t = Testbed::new(quiet(TestbedKind::Drawer), PullAttachment::handle()).unwrap();
        // With only the seating slack the taut string stops the drawer at 50 mm.
        for _ in 0..2000 {
            t.step(20.0, 0.001).unwrap();
        }
        assert!((t.state().opening - 50.0).abs() < 1e-9);
        t.set_opening(0.0);
        t.set_slack(50.0);
        t.release_slack().unwrap();
        let events = run_reset(&mut t, 10.0);
        assert_eq!(events[0].1, SimEvent::SlackReleased);
        for _ in 0..2000 {
            t.step(20.0, 0.001).unwrap();
        }
        assert_eq!(t.state().opening, 350.0);
    }

    #[test]
    fn dislodge_freezes_state() {
        let mut t = drawer_free(quiet(TestbedKind::Drawer));
        for _ in 0..100 {
            t.step(10.0, 0.001).unwrap();
        }
        t.check_safety(10.0);
        assert!(!t.state().dislodged);
        t.check_safety(80.0);
        assert!(t.state().dislodged);
        let before = t.state().clone();
        for _ in 0..100 {
            t.step(10.0, 0.001).unwrap();
        }
        assert_eq!(t.state().opening, before.opening);
        assert_eq!(t.state().velocity, before.velocity);
        assert_eq!(t.drain_events(), vec![SimEvent::Dislodged]);
        assert_eq!(t.begin_reset(), Err(SimError::Dislodged));
        t.clear_fault();
        t.begin_reset().unwrap();
    }

    #[test]
    fn no_grip_reads_noise_floor() {
        let mut t = Testbed::new(SimParams::for_testbed(TestbedKind::Drawer).with_seed(11), PullAttachment::handle()).unwrap();
        let first = t.sense_with(None);
        assert_eq!(first.fsr_counts.len(), 12);
        assert!(first.fsr_counts.iter().all(|&c| c <= 6), "{:?}", first.fsr_counts);
        // Noise is sigma = 2 counts, so the 6-count floor is a 3-sigma bound.
        let mut above = 0;
        for _ in 0..500 {
            above += t.sense_with(None).fsr_counts.iter().filter(|&&c| c > 6).count();
        }
        assert!(above < 6 * 12 * 500 / 1000, "{above}");
        let mut quiet = Testbed::new(quiet(TestbedKind::Drawer), PullAttachment::handle()).unwrap();
        assert!(quiet.sense_with(None).fsr_counts.iter().all(|&c| c == 0));
    }

    #[test]
    fn contact_on_channel_nine() {
        let mut t = Testbed::new(SimParams::for_testbed(TestbedKind::Drawer).with_seed(5), PullAttachment::handle()).unwrap();
        let ch9 = t.attachment().fsr_positions[9];
        let grip = GripContact {
            contacts: vec![Contact { point: ch9, normal_force: 10.0 }],
            tangential_load: 0.0,
            friction_coefficient: 0.8,
        };
        let f = t.sense_with(Some(&grip));
        assert!((i32::from(f.fsr_counts[9]) - 3863).abs() <= 6, "{}", f.fsr_counts[9]);
        // Front column sits half a circumference away.
        assert!(f.fsr_counts[3] <= 6);
        assert!(f.fsr_counts[0] <= 6);
    }

    #[test]
    fn coupling_inside_cone_moves_drawer() {
        let mut t = drawer_free(quiet(TestbedKind::Drawer));
        let grip = GripContact {
            contacts: vec![
                Contact { point: [-HANDLE_RADIUS_MM, 0.0, 12.5], normal_force: 20.0 },
                Contact { point: [HANDLE_RADIUS_MM, 0.0, 0.0], normal_force: 20.0 },
            ],
            tangential_load: 0.0,
            friction_coefficient: 0.8,
        };
        t.set_coupling(Some(ArmCoupling {
            grip: Some(grip),
            target_mm: 100.0,
            target_velocity: 0.0,
            stiffness: 2000.0,
            damping: 120.0,
            force_limit: 30.0,
            inward_force: 0.0,
        }))
        .unwrap();
        for _ in 0..3000 {
            t.step_coupled(0.001).unwrap();
        }
        assert!((t.state().opening - 100.0).abs() < 2.0, "{}", t.state().opening);
    }

    #[test]
    fn params_from_partial_json() {
        let p = SimParams::from_json(r#"{"testbed":"Door","rng_seed":9,"sensors":{"noise":false}}"#).unwrap();
        assert_eq!(p.testbed, TestbedKind::Door);
        assert_eq!(p.rng_seed, 9);
        assert!(!p.sensors.noise);
        assert_eq!(p.sensors.tof_sigma_mm, 2.0);
        assert_eq!(p.reset_speed, 30.0);
        assert!(SimParams::from_json(r#"{"testbed":"Door","brake_noise_amplitude":0.5}"#).is_err());
        assert!(SimParams::from_json(r#"{"drawer_mass":1}"#).is_err());
    }
}

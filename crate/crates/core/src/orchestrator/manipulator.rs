//! Manipulator action interface and a scripted, seeded stand-in arm.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::model::{grasp_catalog, AttachmentKind, TestbedKind, HANDLE_RADIUS_MM, KNOB_RADIUS_MM};
use crate::sim::grip::{ArmCoupling, Contact, GripContact};

pub const JOINT_COUNT: usize = 7;

/// Force/velocity schedule of a pull.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PullProfile {
    /// Peak commanded pull, N.
    pub max_pull: f64,
    pub ramp_s: f64,
    pub hold_s: f64,
    pub release_s: f64,
    /// Handle travel the arm aims for, mm.
    pub target_mm: f64,
    pub speed_mm_s: f64,
    /// Impedance gains, N/m and N*s/m.
    pub stiffness: f64,
    pub damping: f64,
}

impl PullProfile {
    pub fn for_testbed(testbed: TestbedKind, max_pull: f64) -> Self {
        let (target_mm, speed_mm_s) = match testbed {
            TestbedKind::Drawer => (300.0, 150.0),
            // 90 degrees at the 0.3 m handle radius, 60 deg/s.
            TestbedKind::Door => (90f64.to_radians() * 300.0, 60f64.to_radians() * 300.0),
        };
        PullProfile {
            max_pull,
            ramp_s: 0.5,
            hold_s: 3.0,
            release_s: 0.2,
            target_mm,
            speed_mm_s,
            stiffness: 2000.0,
            damping: 100.0,
        }
    }

    /// Trapezoidal force ceiling `t` seconds into the pull stage (release included).
    pub fn envelope(&self, t: f64) -> f64 {
        let up = self.ramp_s;
        let hold_end = up + self.hold_s;
        let end = hold_end + self.release_s;
        if t <= 0.0 || t >= end {
            0.0
        } else if t < up {
            self.max_pull * t / up
        } else if t <= hold_end {
            self.max_pull
        } else {
            self.max_pull * (end - t) / self.release_s
        }
    }

    pub fn pull_duration(&self) -> f64 {
        self.ramp_s + self.hold_s + self.release_s
    }

    /// Target handle displacement `t` seconds into the pull.
    pub fn target(&self, t: f64) -> (f64, f64) {
        let x = self.speed_mm_s * t.max(0.0);
        if x >= self.target_mm {
            (self.target_mm, 0.0)
        } else {
            (x, self.speed_mm_s)
        }
    }
}

/// One grasp library entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraspScript {
    /// Contact points on the attachment with their share of the grip force.
    pub contacts: Vec<([f64; 3], f64)>,
    pub grip_force: f64,
    pub friction_coefficient: f64,
    pub max_pull: f64,
    /// Gripper pose at grasp, metres and radians.
    pub pose: [f64; 6],
}

impl GraspScript {
    pub fn grip(&self, total_normal: f64) -> GripContact {
        let share: f64 = self.contacts.iter().map(|c| c.1).sum();
        GripContact {
            contacts: self
                .contacts
                .iter()
                .map(|&(point, w)| Contact { point, normal_force: total_normal * w / share })
                .collect(),
            tangential_load: 0.0,
            friction_coefficient: self.friction_coefficient,
        }
    }
}

fn on_cylinder(phi_deg: f64, z: f64) -> [f64; 3] {
    let p = phi_deg.to_radians();
    [HANDLE_RADIUS_MM * p.cos(), HANDLE_RADIUS_MM * p.sin(), z]
}

fn on_sphere(theta_deg: f64, around_deg: f64) -> [f64; 3] {
    // theta from the +x (pull) pole, `around` about the x axis.
    let (t, a) = (theta_deg.to_radians(), around_deg.to_radians());
    [KNOB_RADIUS_MM * t.cos(), KNOB_RADIUS_MM * t.sin() * a.cos(), KNOB_RADIUS_MM * t.sin() * a.sin()]
}

/// Grasp library for every catalog entry. Handle grasps put a finger pad on
/// the back column so channel 9 sees the top finger.
pub fn default_grasp_library(testbed: TestbedKind) -> BTreeMap<String, GraspScript> {
    let max_pull = match testbed {
        TestbedKind::Drawer => 40.0,
        TestbedKind::Door => 30.0,
    };
    let back = 180.0;
    let handle = |variant: usize| -> Vec<([f64; 3], f64)> {
        match variant {
            // fingers wrapped behind, thumb over the top
            0 => vec![
                (on_cylinder(back, 12.5), 1.0),
                (on_cylinder(back, -12.5), 0.8),
                (on_cylinder(back, -37.5), 0.6),
                (on_cylinder(90.0, 0.0), 1.2),
            ],
            // palm on the front, fingers behind
            1 => vec![
                (on_cylinder(back, 12.5), 1.0),
                (on_cylinder(back, -12.5), 1.0),
                (on_cylinder(0.0, 0.0), 1.5),
            ],
            // fingertips only
            2 => vec![(on_cylinder(back - 20.0, 12.5), 1.0), (on_cylinder(back + 20.0, -12.5), 1.0), (on_cylinder(20.0, 0.0), 1.0)],
            // side grasp: pinch across the ends
            _ => vec![(on_cylinder(back, 37.5), 1.0), (on_cylinder(back, 12.5), 0.7), (on_cylinder(-60.0, 25.0), 1.0)],
        }
    };
    let knob = |variant: usize| -> Vec<([f64; 3], f64)> {
        match variant {
            0 => vec![(on_sphere(110.0, 90.0), 1.0), (on_sphere(110.0, 210.0), 1.0), (on_sphere(110.0, 330.0), 1.0)],
            1 => vec![(on_sphere(100.0, 80.0), 1.0), (on_sphere(100.0, 260.0), 1.0)],
            2 => vec![(on_sphere(115.0, 90.0), 1.0), (on_sphere(115.0, 180.0), 0.6), (on_sphere(115.0, 0.0), 0.6)],
            3 => vec![(on_sphere(105.0, 45.0), 1.0), (on_sphere(105.0, 225.0), 1.0)],
            _ => vec![(on_sphere(100.0, 0.0), 1.0), (on_sphere(100.0, 180.0), 1.0)],
        }
    };
    let mut lib = BTreeMap::new();
    for attachment in [AttachmentKind::Handle, AttachmentKind::Knob] {
        for (i, g) in grasp_catalog(testbed, attachment).into_iter().enumerate() {
            let (contacts, mu) = match attachment {
                AttachmentKind::Handle => (handle(i % 4), 0.8),
                AttachmentKind::Knob => (knob(i), 0.7),
            };
            let yaw = 0.1 * i as f64;
            lib.insert(
                g.id,
                GraspScript {
                    contacts,
                    grip_force: 60.0,
                    friction_coefficient: mu,
                    max_pull,
                    pose: [0.55, 0.0, 0.32, 0.0, std::f64::consts::FRAC_PI_2, yaw],
                },
            );
        }
    }
    lib
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManipulatorGoal {
    pub grasp: String,
    pub attachment: AttachmentKind,
    pub testbed: TestbedKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ActionStage {
    Approach,
    Grasp,
    Pull,
    Retreat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointFeedback {
    pub t: f64,
    pub q: Vec<f64>,
    pub qd: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionResult {
    pub completed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abort_reason: Option<String>,
}

/// What the arm wants applied to the testbed this tick.
#[derive(Debug, Clone, PartialEq)]
pub enum Interaction {
    /// Not touching the attachment.
    Free,
    /// A new grip (replaces any held one).
    Grip(ArmCoupling),
    /// Update targets and force limit, keep the grip as it is.
    Drive(ArmCoupling),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionStep {
    pub stage: ActionStage,
    pub interaction: Interaction,
    pub feedback: JointFeedback,
    /// Present exactly once per goal, on the final step.
    pub result: Option<ActionResult>,
}

/// Arm side of a trial: the orchestrator starts a goal and then steps the
/// action at its control rate until a result arrives.
pub trait Manipulator {
    fn joint_count(&self) -> usize;
    /// Planned gripper pose for the goal, if the arm knows the grasp.
    fn grasp_pose(&self, goal: &ManipulatorGoal) -> Option<[f64; 6]>;
    fn start(&mut self, goal: ManipulatorGoal, now: f64) -> Result<(), String>;
    /// `handle_mm` is the measured handle displacement along the pull.
    fn step(&mut self, now: f64, handle_mm: f64) -> ActionStep;
    /// Preempts the running goal; the next step returns the abort result.
    fn cancel(&mut self, reason: &str);
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptConfig {
    pub approach_s: f64,
    pub grasp_s: f64,
    pub retreat_s: f64,
    /// Per-joint feedback noise, rad.
    pub joint_sigma: f64,
    /// Replace every grasp's grip with 10 N total normal force at mu 0.8.
    pub weak_grip: bool,
    /// Test hook: abort the action when this stage starts.
    #[serde(default)]
    pub abort_at: Option<ActionStage>,
}

impl Default for ScriptConfig {
    fn default() -> Self {
        ScriptConfig { approach_s: 0.5, grasp_s: 0.3, retreat_s: 0.3, joint_sigma: 0.002, weak_grip: false, abort_at: None }
    }
}

pub const WEAK_GRIP_FORCE: f64 = 10.0;
pub const WEAK_GRIP_MU: f64 = 0.8;

const HOME: [f64; JOINT_COUNT] = [0.0, 0.26, 3.14, -2.27, 0.0, 0.96, 1.57];
const PREGRASP: [f64; JOINT_COUNT] = [0.05, 0.65, 3.10, -1.55, 0.02, 1.20, 1.60];
/// Joint displacement per metre of handle travel.
const PULL_JACOBIAN: [f64; JOINT_COUNT] = [0.0, -1.1, 0.0, -1.7, 0.0, 0.6, 0.0];

struct Active {
    goal: ManipulatorGoal,
    script: GraspScript,
    profile: PullProfile,
    t0: f64,
    stage: ActionStage,
    last_q: Option<(f64, [f64; JOINT_COUNT])>,
    cancelled: Option<String>,
    done: bool,
}

/// Deterministic stand-in arm: fixed stage timings, library-driven grips,
/// Gaussian joint noise from a seeded stream.
pub struct ScriptedManipulator {
    library: BTreeMap<String, GraspScript>,
    config: ScriptConfig,
    rng: ChaCha8Rng,
    noise: Normal<f64>,
    active: Option<Active>,
}

impl ScriptedManipulator {
    /// Goal currently being executed, if any.
    pub fn current_goal(&self) -> Option<&ManipulatorGoal> {
        self.active.as_ref().filter(|a| !a.done).map(|a| &a.goal)
    }

    pub fn new(testbed: TestbedKind, config: ScriptConfig, seed: u64) -> Self {
        let noise = Normal::new(0.0, config.joint_sigma.max(0.0)).expect("finite sigma");
        ScriptedManipulator {
            library: default_grasp_library(testbed),
            config,
            rng: ChaCha8Rng::seed_from_u64(seed),
            noise,
            active: None,
        }
    }

    pub fn config(&self) -> &ScriptConfig {
        &self.config
    }

    pub fn config_mut(&mut self) -> &mut ScriptConfig {
        &mut self.config
    }

    pub fn library(&self) -> &BTreeMap<String, GraspScript> {
        &self.library
    }

    pub fn script_for(&self, grasp: &str) -> Option<GraspScript> {
        let mut s = self.library.get(grasp)?.clone();
        if self.config.weak_grip {
            s.grip_force = WEAK_GRIP_FORCE;
            s.friction_coefficient = WEAK_GRIP_MU;
        }
        Some(s)
    }

    fn stage_at(&self, a: &Active, t: f64) -> (ActionStage, f64) {
        let c = &self.config;
        let mut start = 0.0;
        for (stage, len) in [
            (ActionStage::Approach, c.approach_s),
            (ActionStage::Grasp, c.grasp_s),
            (ActionStage::Pull, a.profile.pull_duration()),
            (ActionStage::Retreat, c.retreat_s),
        ] {
            if t < start + len {
                return (stage, t - start);
            }
            start += len;
        }
        (ActionStage::Retreat, f64::INFINITY)
    }

    fn nominal_q(&self, stage: ActionStage, local: f64, handle_mm: f64) -> [f64; JOINT_COUNT] {
        let blend = |a: &[f64; JOINT_COUNT], b: &[f64; JOINT_COUNT], s: f64| {
            let s = 0.5 - 0.5 * (std::f64::consts::PI * s.clamp(0.0, 1.0)).cos();
            std::array::from_fn(|i| a[i] + (b[i] - a[i]) * s)
        };
        let at_handle = |mm: f64| std::array::from_fn(|i| PREGRASP[i] + PULL_JACOBIAN[i] * mm / 1000.0);
        match stage {
            ActionStage::Approach => blend(&HOME, &PREGRASP, local / self.config.approach_s),
            ActionStage::Grasp => PREGRASP,
            ActionStage::Pull => at_handle(handle_mm),
            ActionStage::Retreat => blend(&at_handle(handle_mm), &HOME, local / self.config.retreat_s),
        }
    }
}

impl Manipulator for ScriptedManipulator {
    fn joint_count(&self) -> usize {
        JOINT_COUNT
    }

    fn grasp_pose(&self, goal: &ManipulatorGoal) -> Option<[f64; 6]> {
        self.library.get(&goal.grasp).map(|s| s.pose)
    }

    fn start(&mut self, goal: ManipulatorGoal, now: f64) -> Result<(), String> {
        let script = self.script_for(&goal.grasp).ok_or_else(|| format!("unknown grasp {:?}", goal.grasp))?;
        let profile = PullProfile::for_testbed(goal.testbed, script.max_pull);
        self.active = Some(Active {
            goal,
            script,
            profile,
            t0: now,
            stage: ActionStage::Approach,
            last_q: None,
            cancelled: None,
            done: false,
        });
        Ok(())
    }

    fn step(&mut self, now: f64, handle_mm: f64) -> ActionStep {
        let Some(mut a) = self.active.take() else {
            return ActionStep {
                stage: ActionStage::Retreat,
                interaction: Interaction::Free,
                feedback: JointFeedback { t: now, q: HOME.to_vec(), qd: vec![0.0; JOINT_COUNT] },
                result: None,
            };
        };
        let t = now - a.t0;
        let (stage, local) = self.stage_at(&a, t);
        let entering = stage != a.stage;
        a.stage = stage;
        if entering && self.config.abort_at == Some(stage) && a.cancelled.is_none() {
            a.cancelled = Some(format!("scripted abort at {stage:?}"));
        }

        let q_nom = self.nominal_q(stage, local, handle_mm);
        let qd: Vec<f64> = match a.last_q {
            Some((tp, qp)) if now > tp => q_nom.iter().zip(qp).map(|(q, p)| (q - p) / (now - tp)).collect(),
            _ => vec![0.0; JOINT_COUNT],
        };
        a.last_q = Some((now, q_nom));
        let q: Vec<f64> = q_nom.iter().map(|q| q + self.noise.sample(&mut self.rng)).collect();
        let feedback = JointFeedback { t: now, q, qd };

        let result = if a.done {
            None
        } else if let Some(reason) = a.cancelled.clone() {
            a.done = true;
            Some(ActionResult { completed: false, abort_reason: Some(reason) })
        } else if local.is_infinite() {
            a.done = true;
            Some(ActionResult { completed: true, abort_reason: None })
        } else {
            None
        };

        let coupling = |force_limit: f64, target: (f64, f64), grip: Option<GripContact>| ArmCoupling {
            grip,
            target_mm: target.0,
            target_velocity: target.1,
            stiffness: a.profile.stiffness,
            damping: a.profile.damping,
            force_limit,
            inward_force: 0.0,
        };
        let interaction = if a.cancelled.is_some() || a.done {
            Interaction::Free
        } else {
            match stage {
                ActionStage::Approach | ActionStage::Retreat => Interaction::Free,
                ActionStage::Grasp if entering => {
                    Interaction::Grip(coupling(0.0, (0.0, 0.0), Some(a.script.grip(a.script.grip_force))))
                }
                ActionStage::Grasp => Interaction::Drive(coupling(0.0, (0.0, 0.0), None)),
                ActionStage::Pull => Interaction::Drive(coupling(a.profile.envelope(local), a.profile.target(local), None)),
            }
        };
        let step = ActionStep { stage, interaction, feedback, result };
        self.active = Some(a);
        step
    }

    fn cancel(&mut self, reason: &str) {
        if let Some(a) = self.active.as_mut() {
            if !a.done && a.cancelled.is_none() {
                a.cancelled = Some(reason.to_string());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PullAttachment;

    #[test]
    fn envelope_is_trapezoid() {
        let p = PullProfile::for_testbed(TestbedKind::Drawer, 40.0);
        assert_eq!(p.envelope(0.0), 0.0);
        assert_eq!(p.envelope(0.25), 20.0);
        assert_eq!(p.envelope(0.5), 40.0);
        assert_eq!(p.envelope(3.5), 40.0);
        assert!((p.envelope(3.6) - 20.0).abs() < 1e-9);
        assert_eq!(p.envelope(3.7), 0.0);
    }

    #[test]
    fn library_contacts_are_on_surface() {
        for tb in [TestbedKind::Door, TestbedKind::Drawer] {
            let lib = default_grasp_library(tb);
            for a in [AttachmentKind::Handle, AttachmentKind::Knob] {
                for g in grasp_catalog(tb, a) {
                    let s = &lib[&g.id];
                    s.grip(s.grip_force).validate(&PullAttachment::of(a)).unwrap();
                }
            }
        }
    }

    #[test]
    fn top_finger_sits_on_channel_9() {
        let lib = default_grasp_library(TestbedKind::Drawer);
        let h = PullAttachment::handle();
        let p = lib["handle-top"].contacts[0].0;
        assert!(h.surface.surface_distance(p, h.fsr_positions[9]) < 1e-9);
    }

    #[test]
    fn weak_grip_cone_is_8n() {
        let m = ScriptedManipulator::new(TestbedKind::Drawer, ScriptConfig { weak_grip: true, ..Default::default() }, 1);
        let s = m.script_for("handle-top").unwrap();
        assert!((s.grip(s.grip_force).friction_limit() - 8.0).abs() < 1e-12);
    }

    fn run(m: &mut ScriptedManipulator) -> Vec<ActionStep> {
        let goal = ManipulatorGoal { grasp: "handle-top".into(), attachment: AttachmentKind::Handle, testbed: TestbedKind::Drawer };
        m.start(goal, 10.0).unwrap();
        (0..600).map(|i| m.step(10.0 + i as f64 * 0.01, 0.0)).collect()
    }

    #[test]
    fn one_result_and_monotone_feedback() {
        let mut m = ScriptedManipulator::new(TestbedKind::Drawer, ScriptConfig::default(), 5);
        let steps = run(&mut m);
        assert_eq!(steps.iter().filter(|s| s.result.is_some()).count(), 1);
        assert!(steps.iter().any(|s| s.result == Some(ActionResult { completed: true, abort_reason: None })));
        assert!(steps.windows(2).all(|w| w[1].feedback.t > w[0].feedback.t));
        assert_eq!(steps.iter().filter(|s| matches!(s.interaction, Interaction::Grip(_))).count(), 1);
    }

    #[test]
    fn reproducible_given_seed() {
        let a = run(&mut ScriptedManipulator::new(TestbedKind::Drawer, ScriptConfig::default(), 5));
        let b = run(&mut ScriptedManipulator::new(TestbedKind::Drawer, ScriptConfig::default(), 5));
        let c = run(&mut ScriptedManipulator::new(TestbedKind::Drawer, ScriptConfig::default(), 6));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn scripted_abort_reports_once() {
        let cfg = ScriptConfig { abort_at: Some(ActionStage::Pull), ..Default::default() };
        let steps = run(&mut ScriptedManipulator::new(TestbedKind::Drawer, cfg, 5));
        let results: Vec<_> = steps.iter().filter_map(|s| s.result.clone()).collect();
        assert_eq!(results.len(), 1);
        assert!(!results[0].completed);
    }
}

//! Shared vocabulary: testbeds, pull attachments, grasps, trials and campaigns.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("resistance {value} N out of range for {testbed} (max {max} N)")]
    ResistanceOutOfRange { testbed: TestbedKind, value: f64, max: f64 },
    #[error("success threshold {value} outside (0, {range}] for {testbed}")]
    ThresholdOutOfRange { testbed: TestbedKind, value: f64, range: f64 },
    #[error("repetitions must be at least 1")]
    NoRepetitions,
    #[error("duplicate trial id {0}")]
    DuplicateTrialId(String),
    #[error("invalid trial spec: {0}")]
    Invalid(String),
}

/// Which of the two testbeds a trial runs on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TestbedKind {
    Door,
    Drawer,
}

impl TestbedKind {
    /// Full opening range in testbed units (degrees for the door, millimetres for the drawer).
    pub fn opening_range(self) -> f64 {
        match self {
            TestbedKind::Door => 110.0,
            TestbedKind::Drawer => 350.0,
        }
    }

    pub fn max_resistance(self) -> f64 {
        match self {
            TestbedKind::Door => 10.0,
            TestbedKind::Drawer => 25.0,
        }
    }

    pub fn unit(self) -> &'static str {
        match self {
            TestbedKind::Door => "deg",
            TestbedKind::Drawer => "mm",
        }
    }

    pub fn default_success_threshold(self) -> f64 {
        match self {
            TestbedKind::Door => 45.0,
            TestbedKind::Drawer => 200.0,
        }
    }

    /// Opening at or below which the testbed counts as closed.
    pub fn closed_tolerance(self) -> f64 {
        match self {
            TestbedKind::Door => 0.5,
            TestbedKind::Drawer => 5.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TestbedKind::Door => "DORM",
            TestbedKind::Drawer => "DWRM",
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            TestbedKind::Door => "door",
            TestbedKind::Drawer => "drawer",
        }
    }

    /// Rejects (never clamps) settings outside `[0, max]`. NaN is rejected too.
    pub fn validate_resistance(self, value: f64) -> Result<f64, ModelError> {
        let max = self.max_resistance();
        if (0.0..=max).contains(&value) {
            Ok(value)
        } else {
            Err(ModelError::ResistanceOutOfRange { testbed: self, value, max })
        }
    }

    pub fn validate_threshold(self, value: f64) -> Result<f64, ModelError> {
        let range = self.opening_range();
        if value > 0.0 && value <= range {
            Ok(value)
        } else {
            Err(ModelError::ThresholdOutOfRange { testbed: self, value, range })
        }
    }
}

impl fmt::Display for TestbedKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AttachmentKind {
    Handle,
    Knob,
}

impl AttachmentKind {
    pub fn channel_count(self) -> usize {
        match self {
            AttachmentKind::Handle => 12,
            AttachmentKind::Knob => 5,
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            AttachmentKind::Handle => "handle",
            AttachmentKind::Knob => "knob",
        }
    }
}

impl fmt::Display for AttachmentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.slug())
    }
}

/// Grip cylinder of the handle: axis along z, centred on the origin.
pub const HANDLE_RADIUS_MM: f64 = 16.0;
pub const HANDLE_HALF_LENGTH_MM: f64 = 75.0;
const HANDLE_ROW_PITCH_MM: f64 = 25.0;
/// Knob sphere, centred on the origin; the pull direction is +x.
pub const KNOB_RADIUS_MM: f64 = 27.0;

pub type Vec3 = [f64; 3];

/// Surface the FSRs sit on, in the attachment frame (millimetres). +x points
/// away from the testbed, along the pull direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Surface {
    Cylinder { radius: f64, half_length: f64 },
    Sphere { radius: f64 },
}

impl Surface {
    /// Distance from `p` to the surface.
    pub fn distance_to(&self, p: Vec3) -> f64 {
        match *self {
            Surface::Cylinder { radius, half_length } => {
                let radial = (p[0].hypot(p[1]) - radius).abs();
                let axial = (p[2].abs() - half_length).max(0.0);
                radial.hypot(axial)
            }
            Surface::Sphere { radius } => (norm(p) - radius).abs(),
        }
    }

    /// Closest point on the surface to `p`.
    pub fn project(&self, p: Vec3) -> Vec3 {
        match *self {
            Surface::Cylinder { radius, half_length } => {
                let phi = p[1].atan2(p[0]);
                [
                    radius * phi.cos(),
                    radius * phi.sin(),
                    p[2].clamp(-half_length, half_length),
                ]
            }
            Surface::Sphere { radius } => {
                let n = norm(p);
                if n == 0.0 {
                    [radius, 0.0, 0.0]
                } else {
                    [p[0] * radius / n, p[1] * radius / n, p[2] * radius / n]
                }
            }
        }
    }

    /// Geodesic distance between two surface points.
    pub fn surface_distance(&self, a: Vec3, b: Vec3) -> f64 {
        match *self {
            Surface::Cylinder { radius, .. } => {
                let dphi = wrap_angle(b[1].atan2(b[0]) - a[1].atan2(a[0]));
                (radius * dphi).hypot(b[2] - a[2])
            }
            Surface::Sphere { radius } => {
                let (na, nb) = (norm(a), norm(b));
                if na == 0.0 || nb == 0.0 {
                    return 0.0;
                }
                let cos = (dot(a, b) / (na * nb)).clamp(-1.0, 1.0);
                radius * cos.acos()
            }
        }
    }

    /// Slides a surface point `dist` millimetres toward the part of the surface
    /// that faces the pull direction (+x). Used to emulate grip slip.
    pub fn slide_toward_pull(&self, p: Vec3, dist: f64) -> Vec3 {
        match *self {
            Surface::Cylinder { radius, .. } => {
                let phi = p[1].atan2(p[0]);
                let step = (dist / radius).min(phi.abs());
                let phi = if phi >= 0.0 { phi - step } else { phi + step };
                [radius * phi.cos(), radius * phi.sin(), p[2]]
            }
            Surface::Sphere { radius } => {
                let q = self.project(p);
                let theta = (q[0] / radius).clamp(-1.0, 1.0).acos();
                let step = (dist / radius).min(theta);
                let new_theta = theta - step;
                let perp = q[1].hypot(q[2]);
                let (uy, uz) = if perp > 0.0 { (q[1] / perp, q[2] / perp) } else { (1.0, 0.0) };
                [
                    radius * new_theta.cos(),
                    radius * new_theta.sin() * uy,
                    radius * new_theta.sin() * uz,
                ]
            }
        }
    }
}

fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut a = a % two_pi;
    if a > std::f64::consts::PI {
        a -= two_pi;
    } else if a < -std::f64::consts::PI {
        a += two_pi;
    }
    a
}

pub(crate) fn norm(p: Vec3) -> f64 {
    dot(p, p).sqrt()
}

pub(crate) fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// An instrumented pull attachment with its FSR layout.
#[derive(Debug, Clone, PartialEq)]
pub struct PullAttachment {
    pub kind: AttachmentKind,
    pub surface: Surface,
    pub fsr_positions: Vec<Vec3>,
}

impl PullAttachment {
    /// Handle: two columns (front facing the puller, back facing the testbed)
    /// of six rows each. Channels 0..6 run up the front column, 6..12 up the back.
    pub fn handle() -> Self {
        let mut fsr_positions = Vec::with_capacity(12);
        for x in [HANDLE_RADIUS_MM, -HANDLE_RADIUS_MM] {
            for row in 0..6 {
                let z = (row as f64 - 2.5) * HANDLE_ROW_PITCH_MM;
                fsr_positions.push([x, 0.0, z]);
            }
        }
        PullAttachment {
            kind: AttachmentKind::Handle,
            surface: Surface::Cylinder {
                radius: HANDLE_RADIUS_MM,
                half_length: HANDLE_HALF_LENGTH_MM,
            },
            fsr_positions,
        }
    }

    /// Knob: five sensors equally spaced around the equator, channel 0 on top.
    pub fn knob() -> Self {
        let fsr_positions = (0..5)
            .map(|k| {
                let phi = std::f64::consts::FRAC_PI_2 + k as f64 * std::f64::consts::TAU / 5.0;
                [0.0, KNOB_RADIUS_MM * phi.cos(), KNOB_RADIUS_MM * phi.sin()]
            })
            .collect();
        PullAttachment {
            kind: AttachmentKind::Knob,
            surface: Surface::Sphere { radius: KNOB_RADIUS_MM },
            fsr_positions,
        }
    }

    pub fn of(kind: AttachmentKind) -> Self {
        match kind {
            AttachmentKind::Handle => Self::handle(),
            AttachmentKind::Knob => Self::knob(),
        }
    }

    pub fn channel_count(&self) -> usize {
        self.fsr_positions.len()
    }
}

/// A scripted grasp, referenced by id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraspType {
    pub id: String,
    pub description: String,
}

fn grasps(list: &[(&str, &str)]) -> Vec<GraspType> {
    list.iter()
        .map(|(id, description)| GraspType {
            id: (*id).to_string(),
            description: (*description).to_string(),
        })
        .collect()
}

/// Grasp catalog per testbed and attachment.
pub fn grasp_catalog(testbed: TestbedKind, attachment: AttachmentKind) -> Vec<GraspType> {
    match (testbed, attachment) {
        (TestbedKind::Door, AttachmentKind::Knob) => grasps(&[
            ("knob-palm-horizontal", "Palm horizontal grasp (straight on)"),
            ("knob-fingertip-horizontal", "Fingertip horizontal grasp (straight on)"),
            ("knob-top-down-horizontal", "Top down horizontal grasp"),
            ("knob-fingertip-angled", "Fingertip angled grasp"),
            ("knob-fingertip-vertical", "Fingertip vertical grasp"),
        ]),
        (TestbedKind::Door, AttachmentKind::Handle) => grasps(&[
            ("handle-palm-horizontal", "Palm horizontal grasp (straight on)"),
            ("handle-fingertip-horizontal", "Fingertip horizontal grasp (straight on)"),
            ("handle-top-down", "Top down grasp"),
            ("handle-fingertip-angled", "Fingertip angled grasp"),
            ("handle-fingertip-vertical", "Fingertip vertical grasp"),
        ]),
        (TestbedKind::Drawer, AttachmentKind::Handle) => grasps(&[
            ("handle-top", "Power grasp from above"),
            ("handle-palm", "Palm grasp (straight on)"),
            ("handle-fingertip", "Fingertip grasp (straight on)"),
            ("handle-side", "Side grasp"),
        ]),
        (TestbedKind::Drawer, AttachmentKind::Knob) => grasps(&[
            ("knob-palm", "Palm grasp (straight on)"),
            ("knob-fingertip", "Fingertip grasp"),
        ]),
    }
}

/// One grasp-and-pull experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSpec {
    pub trial_id: String,
    pub testbed: TestbedKind,
    pub attachment: AttachmentKind,
    pub grasp: String,
    pub resistance: f64,
    pub success_threshold: f64,
    pub repetition_index: u32,
}

impl TrialSpec {
    pub fn new(
        trial_id: impl Into<String>,
        testbed: TestbedKind,
        attachment: AttachmentKind,
        grasp: impl Into<String>,
        resistance: f64,
        success_threshold: f64,
        repetition_index: u32,
    ) -> Result<Self, ModelError> {
        let spec = TrialSpec {
            trial_id: trial_id.into(),
            testbed,
            attachment,
            grasp: grasp.into(),
            resistance,
            success_threshold,
            repetition_index,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.testbed.validate_resistance(self.resistance)?;
        self.testbed.validate_threshold(self.success_threshold)?;
        if self.trial_id.is_empty() {
            return Err(ModelError::Invalid("empty trial id".into()));
        }
        if self.trial_id.contains(['/', '\\']) || self.trial_id.starts_with('.') {
            return Err(ModelError::Invalid(format!("trial id {:?} is not a valid path component", self.trial_id)));
        }
        Ok(())
    }
}

/// Cross-product grid of grasps x resistances x repetitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignSpec {
    pub id: String,
    pub testbed: TestbedKind,
    pub attachment_grasps: BTreeMap<AttachmentKind, Vec<String>>,
    pub resistances: Vec<f64>,
    pub repetitions: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub success_threshold: Option<f64>,
}

impl CampaignSpec {
    pub fn success_threshold(&self) -> f64 {
        self.success_threshold
            .unwrap_or_else(|| self.testbed.default_success_threshold())
    }

    /// Closed-form number of trials the grid expands to.
    pub fn trial_count(&self) -> usize {
        let grasps: usize = self.attachment_grasps.values().map(Vec::len).sum();
        grasps * self.resistances.len() * self.repetitions as usize
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Full door grid: 5 handle and 5 knob grasps at
    /// 0, 5 and 10 N, ten repetitions each.
    pub fn door_dataset() -> Self {
        let grid = |a| grasp_catalog(TestbedKind::Door, a).into_iter().map(|g| g.id).collect();
        CampaignSpec {
            id: "dorm".into(),
            testbed: TestbedKind::Door,
            attachment_grasps: BTreeMap::from([
                (AttachmentKind::Handle, grid(AttachmentKind::Handle)),
                (AttachmentKind::Knob, grid(AttachmentKind::Knob)),
            ]),
            resistances: vec![0.0, 5.0, 10.0],
            repetitions: 10,
            success_threshold: None,
        }
    }

    /// The drawer grid: 4 handle and 2 knob grasps at six resistances, ten repetitions each.
    pub fn drawer_dataset() -> Self {
        let grid = |a| grasp_catalog(TestbedKind::Drawer, a).into_iter().map(|g| g.id).collect();
        CampaignSpec {
            id: "dwrm".into(),
            testbed: TestbedKind::Drawer,
            attachment_grasps: BTreeMap::from([
                (AttachmentKind::Handle, grid(AttachmentKind::Handle)),
                (AttachmentKind::Knob, grid(AttachmentKind::Knob)),
            ]),
            resistances: vec![0.0, 7.0, 10.0, 15.0, 20.0, 25.0],
            repetitions: 10,
            success_threshold: None,
        }
    }
}

/// Stable trial id: `<campaign>-<attachment>-<grasp>-r<resistance>-<rep>`.
pub fn trial_id(campaign: &str, attachment: AttachmentKind, grasp: &str, resistance: f64, rep: u32) -> String {
    format!("{campaign}-{attachment}-{grasp}-r{resistance}-{rep}")
}

/// Expands a campaign grid into trials ordered by (attachment, grasp, resistance, repetition).
pub fn expand_campaign(spec: &CampaignSpec) -> Result<Vec<TrialSpec>, ModelError> {
    if spec.repetitions == 0 {
        return Err(ModelError::NoRepetitions);
    }
    for &r in &spec.resistances {
        spec.testbed.validate_resistance(r)?;
    }
    let threshold = spec.testbed.validate_threshold(spec.success_threshold())?;

    let mut out = Vec::with_capacity(spec.trial_count());
    let mut seen = HashSet::new();
    for (&attachment, grasps) in &spec.attachment_grasps {
        for grasp in grasps {
            for &resistance in &spec.resistances {
                for rep in 0..spec.repetitions {
                    let id = trial_id(&spec.id, attachment, grasp, resistance, rep);
                    if !seen.insert(id.clone()) {
                        return Err(ModelError::DuplicateTrialId(id));
                    }
                    out.push(TrialSpec::new(
                        id,
                        spec.testbed,
                        attachment,
                        grasp.clone(),
                        resistance,
                        threshold,
                        rep,
                    )?);
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TrialLabel {
    Success,
    Failure,
    Aborted,
    Error,
}

impl fmt::Display for TrialLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub label: TrialLabel,
    pub peak_opening: f64,
    pub pull_duration: f64,
}

impl TrialResult {
    pub fn error() -> Self {
        TrialResult { label: TrialLabel::Error, peak_opening: 0.0, pull_duration: 0.0 }
    }
}

/// Labels a trial from its opening trace `(t, opening)`.
///
/// Empty or non-monotone traces yield an `Error` result rather than failing.
pub fn evaluate_success(trace: &[(f64, f64)], spec: &TrialSpec, terminated_normally: bool) -> TrialResult {
    if trace.is_empty()
        || trace.windows(2).any(|w| !(w[1].0 >= w[0].0))
        || trace.iter().any(|&(t, x)| !t.is_finite() || !x.is_finite())
    {
        return TrialResult::error();
    }
    let peak_opening = trace.iter().map(|&(_, x)| x).fold(f64::NEG_INFINITY, f64::max);
    let tol = spec.testbed.closed_tolerance();
    let open: Vec<f64> = trace.iter().filter(|&&(_, x)| x > tol).map(|&(t, _)| t).collect();
    let pull_duration = match (open.first(), open.last()) {
        (Some(a), Some(b)) => b - a,
        _ => 0.0,
    };
    let label = if !terminated_normally {
        TrialLabel::Aborted
    } else if peak_opening >= spec.success_threshold {
        TrialLabel::Success
    } else {
        TrialLabel::Failure
    };
    TrialResult { label, peak_opening, pull_duration }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn drawer_spec(threshold: f64) -> TrialSpec {
        TrialSpec::new("t", TestbedKind::Drawer, AttachmentKind::Handle, "handle-top", 0.0, threshold, 0).unwrap()
    }

    #[test]
    fn dataset_grids_expand_to_full_counts() {
        let door = expand_campaign(&CampaignSpec::door_dataset()).unwrap();
        let drawer = expand_campaign(&CampaignSpec::drawer_dataset()).unwrap();
        assert_eq!(door.len(), 300);
        assert_eq!(drawer.len(), 360);
    }

    #[test]
    fn expansion_order_and_ids() {
        let spec = CampaignSpec {
            id: "c".into(),
            testbed: TestbedKind::Drawer,
            attachment_grasps: BTreeMap::from([
                (AttachmentKind::Knob, vec!["k1".into()]),
                (AttachmentKind::Handle, vec!["h1".into(), "h2".into()]),
            ]),
            resistances: vec![0.0, 7.5],
            repetitions: 2,
            success_threshold: None,
        };
        let ids: Vec<_> = expand_campaign(&spec).unwrap().into_iter().map(|t| t.trial_id).collect();
        assert_eq!(ids.len(), 12);
        assert_eq!(ids[0], "c-handle-h1-r0-0");
        assert_eq!(ids[1], "c-handle-h1-r0-1");
        assert_eq!(ids[2], "c-handle-h1-r7.5-0");
        assert_eq!(ids[4], "c-handle-h2-r0-0");
        assert_eq!(ids[11], "c-knob-k1-r7.5-1");
    }

    #[test]
    fn expansion_rejects_bad_grids() {
        let mut spec = CampaignSpec::drawer_dataset();
        spec.repetitions = 0;
        assert_eq!(expand_campaign(&spec), Err(ModelError::NoRepetitions));

        let mut spec = CampaignSpec::door_dataset();
        spec.resistances.push(12.0);
        match expand_campaign(&spec) {
            Err(ModelError::ResistanceOutOfRange { value, max, .. }) => {
                assert_eq!(value, 12.0);
                assert_eq!(max, 10.0);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(expand_campaign(&spec).unwrap_err().to_string().contains("12"));

        let mut spec = CampaignSpec::door_dataset();
        spec.resistances = vec![5.0, 5.0];
        assert!(matches!(expand_campaign(&spec), Err(ModelError::DuplicateTrialId(_))));

        let mut spec = CampaignSpec::door_dataset();
        spec.attachment_grasps.clear();
        assert!(expand_campaign(&spec).unwrap().is_empty());
    }

    #[test]
    fn campaign_json_roundtrip() {
        let spec = CampaignSpec::drawer_dataset();
        let text = serde_json::to_string(&spec).unwrap();
        assert!(text.contains("\"Handle\""));
        assert_eq!(CampaignSpec::from_json(&text).unwrap(), spec);
    }

    #[test]
    fn knob_catalog_has_the_five_door_grasps() {
        let knob = grasp_catalog(TestbedKind::Door, AttachmentKind::Knob);
        assert_eq!(knob.len(), 5);
        assert_eq!(knob[0].description, "Palm horizontal grasp (straight on)");
        assert_eq!(grasp_catalog(TestbedKind::Drawer, AttachmentKind::Handle).len(), 4);
        assert_eq!(grasp_catalog(TestbedKind::Drawer, AttachmentKind::Knob).len(), 2);
    }

    #[test]
    fn attachments_match_channel_counts() {
        for kind in [AttachmentKind::Handle, AttachmentKind::Knob] {
            let a = PullAttachment::of(kind);
            assert_eq!(a.channel_count(), kind.channel_count());
            for &p in &a.fsr_positions {
                assert!(a.surface.distance_to(p) < 1e-9);
            }
        }
    }

    #[test]
    fn slide_stays_on_surface_and_moves_toward_pull() {
        for a in [PullAttachment::handle(), PullAttachment::knob()] {
            for &p in &a.fsr_positions {
                let q = a.surface.slide_toward_pull(p, 5.0);
                assert!(a.surface.distance_to(q) < 1e-9);
                assert!(q[0] >= p[0] - 1e-12);
            }
        }
        let h = PullAttachment::handle();
        let back = [-HANDLE_RADIUS_MM, 0.0, 0.0];
        let moved = h.surface.slide_toward_pull(back, 5.0);
        assert!((h.surface.surface_distance(back, moved) - 5.0).abs() < 1e-9);
    }

    #[test]
    fn success_examples() {
        let trace = vec![(0.0, 0.0), (1.0, 250.0), (2.0, 100.0)];
        let r = evaluate_success(&trace, &drawer_spec(200.0), true);
        assert_eq!(r.label, TrialLabel::Success);
        assert_eq!(r.peak_opening, 250.0);

        let door = TrialSpec::new("d", TestbedKind::Door, AttachmentKind::Knob, "g", 0.0, 45.0, 0).unwrap();
        let r = evaluate_success(&[(0.0, 0.0), (1.0, 0.0)], &door, true);
        assert_eq!(r.label, TrialLabel::Failure);
        assert_eq!(r.peak_opening, 0.0);
        assert_eq!(r.pull_duration, 0.0);

        let r = evaluate_success(&[(0.0, 0.0), (1.0, 210.0)], &drawer_spec(200.0), false);
        assert_eq!(r.label, TrialLabel::Aborted);
        assert_eq!(r.peak_opening, 210.0);

        assert_eq!(evaluate_success(&[], &drawer_spec(200.0), true).label, TrialLabel::Error);
        assert_eq!(
            evaluate_success(&[(1.0, 0.0), (0.5, 0.0)], &drawer_spec(200.0), true).label,
            TrialLabel::Error
        );
    }

    #[test]
    fn pull_duration_spans_open_samples() {
        let trace = vec![(0.0, 0.0), (1.0, 6.0), (2.0, 300.0), (3.5, 10.0), (4.0, 2.0)];
        let r = evaluate_success(&trace, &drawer_spec(200.0), true);
        assert_eq!(r.pull_duration, 2.5);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn raising_threshold_never_turns_failure_into_success(
                xs in proptest::collection::vec(0.0f64..350.0, 1..50),
                a in 1.0f64..350.0,
                b in 1.0f64..350.0,
            ) {
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                let trace: Vec<_> = xs.iter().enumerate().map(|(i, &x)| (i as f64, x)).collect();
                let low = evaluate_success(&trace, &drawer_spec(lo), true);
                let high = evaluate_success(&trace, &drawer_spec(hi), true);
                if low.label == TrialLabel::Failure {
                    prop_assert_eq!(high.label, TrialLabel::Failure);
                }
            }

            #[test]
            fn expansion_count_matches_closed_form(
                handles in 0usize..5, knobs in 0usize..5, nres in 1usize..6, reps in 1u32..5,
            ) {
                let spec = CampaignSpec {
                    id: "p".into(),
                    testbed: TestbedKind::Drawer,
                    attachment_grasps: BTreeMap::from([
                        (AttachmentKind::Handle, (0..handles).map(|i| format!("h{i}")).collect()),
                        (AttachmentKind::Knob, (0..knobs).map(|i| format!("k{i}")).collect()),
                    ]),
                    resistances: (0..nres).map(|i| i as f64 * 5.0).collect(),
                    repetitions: reps,
                    success_threshold: None,
                };
                let a = expand_campaign(&spec).unwrap();
                prop_assert_eq!(a.len(), spec.trial_count());
                prop_assert_eq!(a, expand_campaign(&spec).unwrap());
            }
        }
    }
}

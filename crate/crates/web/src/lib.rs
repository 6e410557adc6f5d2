//! wasm-bindgen exports for the static demo page in `www/`.
//!
//! Every export returns a JSON string: either the result or `{"error": ...}`.
//! Plain strings keep the functions callable from native tests.

use std::cell::RefCell;
use std::rc::Rc;

use serde::Serialize;
use serde_json::json;
use testbed_core::analysis::{detect_onset_release, normalize_window, DetectParams, DEFAULT_POINTS};
use testbed_core::daemon::DaemonCore;
use testbed_core::model::{grasp_catalog, AttachmentKind, PullAttachment, Surface, TestbedKind, TrialSpec};
use testbed_core::orchestrator::link::InProcessLink;
use testbed_core::orchestrator::manipulator::{ScriptConfig, ScriptedManipulator};
use testbed_core::orchestrator::{Monitor, Orchestrator, OrchestratorConfig};
use testbed_core::protocol::Telemetry;
use testbed_core::sim::grip::{Contact, GripContact};
use testbed_core::sim::sensors::SensorParams;
use testbed_core::sim::{SimParams, Testbed};
use wasm_bindgen::prelude::*;

/// Samples kept per returned series.
const MAX_POINTS: usize = 400;

fn error(msg: impl std::fmt::Display) -> String {
    json!({ "error": msg.to_string() }).to_string()
}

fn testbed_kind(name: &str) -> Result<TestbedKind, String> {
    match name {
        "drawer" => Ok(TestbedKind::Drawer),
        "door" => Ok(TestbedKind::Door),
        other => Err(format!("unknown testbed {other:?}")),
    }
}

fn attachment_kind(name: &str) -> Result<AttachmentKind, String> {
    match name {
        "handle" => Ok(AttachmentKind::Handle),
        "knob" => Ok(AttachmentKind::Knob),
        other => Err(format!("unknown attachment {other:?}")),
    }
}

/// Grasp ids for a testbed/attachment pair, as a JSON array.
#[wasm_bindgen]
pub fn grasps(testbed: &str, attachment: &str) -> String {
    match (testbed_kind(testbed), attachment_kind(attachment)) {
        (Ok(t), Ok(a)) => json!(grasp_catalog(t, a).into_iter().map(|g| g.id).collect::<Vec<_>>()).to_string(),
        (Err(e), _) | (_, Err(e)) => error(e),
    }
}

#[derive(Default)]
struct Capture {
    frames: Vec<Telemetry>,
}

struct Recorder(Rc<RefCell<Capture>>);

impl Monitor for Recorder {
    fn telemetry(&mut self, _seq: u64, telemetry: &Telemetry) {
        self.0.borrow_mut().frames.push(telemetry.clone());
    }
}

#[derive(Serialize)]
struct PullResult {
    label: String,
    fault: Option<String>,
    channel: usize,
    /// `[t, measured opening]`
    opening: Vec<[f64; 2]>,
    /// `[t, counts]` on `channel`
    fsr: Vec<[f64; 2]>,
    peak_opening: f64,
}

fn thin<T: Copy>(v: Vec<T>) -> Vec<T> {
    let step = v.len().div_ceil(MAX_POINTS).max(1);
    v.into_iter().step_by(step).collect()
}

fn simulate(testbed: &str, attachment: &str, grasp: &str, resistance: f64, weak_grip: bool, seed: u64) -> Result<PullResult, String> {
    let testbed = testbed_kind(testbed)?;
    let attachment = attachment_kind(attachment)?;
    let spec = TrialSpec::new("demo", testbed, attachment, grasp, resistance, testbed.default_success_threshold(), 0).map_err(|e| e.to_string())?;
    let core = DaemonCore::simulated(SimParams::for_testbed(testbed).with_seed(seed), attachment).map_err(|e| e.to_string())?;
    let arm = ScriptedManipulator::new(testbed, ScriptConfig { weak_grip, ..Default::default() }, seed);
    let mut orch = Orchestrator::new(InProcessLink::new(core), arm, OrchestratorConfig { seed, ..Default::default() }).map_err(|e| e.to_string())?;
    let capture = Rc::new(RefCell::new(Capture::default()));
    orch.set_monitor(Box::new(Recorder(capture.clone())));
    let outcome = orch.run_trial(&spec, None).map_err(|e| e.to_string())?;
    let frames = std::mem::take(&mut capture.borrow_mut().frames);
    // Channel 9 sits under the top finger of the handle grasps.
    let channel = if attachment == AttachmentKind::Handle { 9 } else { 0 };
    let peak_opening = frames.iter().filter_map(|f| f.frame.truth.as_ref().map(|t| t.opening)).fold(0.0, f64::max);
    let opening = thin(frames.iter().map(|f| [f.frame.timestamp, f.frame.opening_measured]).collect());
    let fsr = thin(
        frames
            .iter()
            .filter_map(|f| f.frame.fsr_counts.get(channel).map(|&c| [f.frame.timestamp, f64::from(c)]))
            .collect(),
    );
    Ok(PullResult { label: format!("{:?}", outcome.label), fault: outcome.fault, channel, opening, fsr, peak_opening })
}

/// Runs one scripted trial on a simulated testbed.
#[wasm_bindgen]
pub fn simulate_pull(testbed: &str, attachment: &str, grasp: &str, resistance: f64, weak_grip: bool, seed: u32) -> String {
    match simulate(testbed, attachment, grasp, resistance, weak_grip, u64::from(seed)) {
        Ok(r) => serde_json::to_string(&r).expect("serializable"),
        Err(e) => error(e),
    }
}

/// Noise-free ADC counts of every channel for one contact on the attachment.
/// `(u, v)` picks the contact: angle around the axis in degrees, then height
/// (handle, mm) or polar angle from the pull pole (knob, degrees).
#[wasm_bindgen]
pub fn fsr_heatmap(attachment: &str, u: f64, v: f64, force: f64) -> String {
    let kind = match attachment_kind(attachment) {
        Ok(k) => k,
        Err(e) => return error(e),
    };
    if !(force.is_finite() && force >= 0.0) {
        return error("force must be a non-negative number");
    }
    let att = PullAttachment::of(kind);
    let point = surface_point(att.surface, u, v);
    let positions = att.fsr_positions.clone();
    let mut params = SimParams::for_testbed(TestbedKind::Drawer);
    params.sensors = SensorParams::noise_free();
    let mut tb = match Testbed::new(params, att) {
        Ok(t) => t,
        Err(e) => return error(e),
    };
    let grip = GripContact { contacts: vec![Contact { point, normal_force: force }], tangential_load: 0.0, friction_coefficient: 0.8 };
    let counts = tb.sense_with(Some(&grip)).fsr_counts;
    json!({ "contact": point, "positions": positions, "counts": counts }).to_string()
}

fn surface_point(surface: Surface, u: f64, v: f64) -> [f64; 3] {
    let a = u.to_radians();
    match surface {
        Surface::Cylinder { radius, half_length } => [radius * a.cos(), radius * a.sin(), v.clamp(-half_length, half_length)],
        Surface::Sphere { radius } => {
            let t = v.to_radians();
            [radius * t.cos(), radius * t.sin() * a.cos(), radius * t.sin() * a.sin()]
        }
    }
}

/// Onset/release of a trace given as parallel arrays, plus the trace
/// resampled onto normalized time.
#[wasm_bindgen]
pub fn detect_onset(times: Vec<f64>, values: Vec<f64>, threshold: f64, sustain_ms: f64) -> String {
    if times.len() != values.len() {
        return error("times and values differ in length");
    }
    let trace: Vec<(f64, f64)> = times.into_iter().zip(values).collect();
    let params = DetectParams { threshold, sustain_s: sustain_ms / 1000.0, ..Default::default() };
    let w = match detect_onset_release(&trace, &params) {
        Ok(w) => w,
        Err(e) => return error(e),
    };
    let normalized = normalize_window(&trace, &w, DEFAULT_POINTS).unwrap_or_default();
    json!({
        "onset": w.onset,
        "release": w.release,
        "baseline": w.baseline,
        "peak": w.peak,
        "normalized": normalized,
    })
    .to_string()
}

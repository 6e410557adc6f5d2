use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use testbed_core::daemon::DaemonCore;
use testbed_core::dataset::CampaignStore;
use testbed_core::gateway::{Gateway, GatewayBody, GatewayClient, GatewayMessage, GatewayOptions, TrialStream};
use testbed_core::model::{AttachmentKind, CampaignSpec, TestbedKind, TrialLabel};
use testbed_core::orchestrator::link::InProcessLink;
use testbed_core::orchestrator::manipulator::{ScriptConfig, ScriptedManipulator};
use testbed_core::orchestrator::{CampaignReport, Control, Orchestrator, OrchestratorConfig, Phase, StatusSnapshot};
use testbed_core::sim::SimParams;

const T: Duration = Duration::from_secs(10);

fn mini_spec(id: &str, reps: u32) -> CampaignSpec {
    let mut spec = CampaignSpec::drawer_dataset();
    spec.id = id.into();
    spec.attachment_grasps.retain(|a, _| *a == AttachmentKind::Handle);
    spec.attachment_grasps.get_mut(&AttachmentKind::Handle).unwrap().truncate(1);
    spec.resistances = vec![0.0];
    spec.repetitions = reps;
    spec
}

/// Runs a campaign on a background thread with a gateway attached.
fn launch(spec: CampaignSpec, dir: &std::path::Path, pace: Option<f64>) -> (Gateway, thread::JoinHandle<CampaignReport>, mpsc::Sender<()>) {
    let store = CampaignStore::create(dir, &spec, 9).unwrap();
    let (ctl_tx, ctl_rx) = mpsc::channel();
    let opts = GatewayOptions { controls: Some(ctl_tx), dataset: Some(store.dir().to_path_buf()) };
    let (gw, monitor) = Gateway::start("127.0.0.1:0", opts).unwrap();
    let (go_tx, go_rx) = mpsc::channel::<()>();
    let h = thread::spawn(move || {
        let mut store = store;
        let core = DaemonCore::simulated(SimParams::for_testbed(TestbedKind::Drawer).with_seed(9), AttachmentKind::Handle).unwrap();
        let mut link = InProcessLink::new(core);
        if let Some(p) = pace {
            link = link.with_pace(p);
        }
        let arm = ScriptedManipulator::new(TestbedKind::Drawer, ScriptConfig::default(), 9);
        let mut o = Orchestrator::new(link, arm, OrchestratorConfig::default()).unwrap();
        o.set_monitor(Box::new(monitor));
        o.set_controls(ctl_rx);
        go_rx.recv().unwrap();
        o.run_campaign(&spec, Some(&mut store)).unwrap()
    });
    (gw, h, go_tx)
}

fn subscribe(gw: &Gateway) -> GatewayClient {
    let mut c = GatewayClient::connect(gw.local_addr()).unwrap();
    let r = c.request(GatewayBody::Subscribe { client: "test".into() }, T).unwrap();
    assert!(matches!(r.body, GatewayBody::Ack(_)), "{r:?}");
    c
}

fn statuses_until_done(c: &mut GatewayClient, trials: usize) -> Vec<(u64, StatusSnapshot)> {
    let mut out = Vec::new();
    loop {
        let m = c.next_push(T).unwrap();
        if let GatewayBody::Status(s) = m.body {
            let finished = s.counts.total() == trials && s.trial_id.is_none();
            out.push((m.seq, s));
            if finished {
                return out;
            }
        }
    }
}

#[test]
fn two_consoles_see_identical_status_sequences() {
    let dir = tempfile::tempdir().unwrap();
    let (gw, h, go) = launch(mini_spec("fan", 2), dir.path(), None);
    let mut a = subscribe(&gw);
    let mut b = subscribe(&gw);
    go.send(()).unwrap();
    let report = h.join().unwrap();
    assert_eq!(report.trials.len(), 2);
    let sa = statuses_until_done(&mut a, 2);
    let sb = statuses_until_done(&mut b, 2);
    assert_eq!(sa, sb);
    assert!(sa.windows(2).all(|w| w[0].0 <= w[1].0));
    let phases: Vec<_> = sa.iter().filter_map(|(_, s)| s.phase).collect();
    assert!(phases.windows(2).any(|w| w == [Phase::Pull, Phase::Evaluate]));
}

#[test]
fn frames_are_decimated() {
    let dir = tempfile::tempdir().unwrap();
    let (gw, h, go) = launch(mini_spec("dec", 1), dir.path(), None);
    let mut c = subscribe(&gw);
    go.send(()).unwrap();
    h.join().unwrap();
    let mut stamps = Vec::new();
    while let Ok(m) = c.next_push(Duration::from_millis(300)) {
        if let GatewayBody::Frame { telemetry, .. } = m.body {
            stamps.push(telemetry.frame.timestamp);
        }
    }
    assert!(stamps.len() > 10);
    for w in stamps.windows(2) {
        assert!(w[1] - w[0] >= 0.05 - 1e-6, "{w:?}");
    }
}

#[test]
fn controls_and_dataset_endpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (gw, h, go) = launch(mini_spec("ctl", 3), dir.path(), Some(8.0));
    let mut c = subscribe(&gw);
    go.send(()).unwrap();
    match c.request(GatewayBody::Control(Control::ResistanceOverride { newtons: 26.0 }), T).unwrap().body {
        GatewayBody::Nack { max, .. } => assert_eq!(max, Some(25.0)),
        other => panic!("{other:?}"),
    }
    // Abort the second trial once it reaches Pull.
    loop {
        if let GatewayBody::Status(s) = c.next_push(T).unwrap().body {
            if s.trial_index == 2 && s.phase == Some(Phase::Pull) {
                break;
            }
        }
    }
    let status = c.status().unwrap();
    assert_eq!((status.trial_index, status.trial_count), (2, 3));
    let r = c.request(GatewayBody::Control(Control::AbortCurrent), T).unwrap();
    assert!(matches!(r.body, GatewayBody::Ack(_)), "{r:?}");
    let mut seen = Vec::new();
    loop {
        if let GatewayBody::Status(s) = c.next_push(T).unwrap().body {
            if s.trial_index == 2 {
                seen.extend(s.phase);
            } else if s.trial_index == 3 {
                break;
            }
        }
    }
    let i = seen.iter().position(|p| *p == Phase::Aborting).expect("Aborting reached");
    assert_eq!(seen[i + 1], Phase::Resetting);
    let report = h.join().unwrap();
    let labels: Vec<_> = report.trials.iter().map(|t| t.label).collect();
    assert_eq!(labels, [TrialLabel::Success, TrialLabel::Aborted, TrialLabel::Success]);

    let listed = match c.request(GatewayBody::ListTrials, T).unwrap().body {
        GatewayBody::Trials { trials } => trials,
        other => panic!("{other:?}"),
    };
    assert_eq!(listed.len(), 3);
    let id = &listed[0].trial_id;
    let (text, partial) = c.fetch_stream(id, TrialStream::Fsr).unwrap();
    assert!(!partial);
    let on_disk = std::fs::read_to_string(dir.path().join("campaign/ctl/trials").join(id).join("fsr.csv")).unwrap();
    assert_eq!(text, on_disk);
    let bad = c.request(GatewayBody::FetchTrial { trial_id: "../x".into(), stream: TrialStream::Meta, offset: 0, limit: None }, T).unwrap();
    assert!(matches!(bad.body, GatewayBody::Nack { .. }));
}

#[test]
fn malformed_and_non_request_messages_are_refused() {
    let (gw, _mon) = Gateway::start("127.0.0.1:0", GatewayOptions::default()).unwrap();
    let mut c = GatewayClient::connect(gw.local_addr()).unwrap();
    let r = c.request(GatewayBody::Status(StatusSnapshot::default()), T).unwrap();
    assert!(matches!(r.body, GatewayBody::Nack { .. }));
    let r = c.request(GatewayBody::Control(Control::Resume), T).unwrap();
    assert!(matches!(r.body, GatewayBody::Nack { ref reason, .. } if reason.contains("no campaign")));
    c.send_raw(&testbed_core::protocol::encode_frame(b"{not json")).unwrap();
    let m = c.next_push(T).unwrap();
    assert!(matches!(m.body, GatewayBody::Nack { .. }));
    let raw = GatewayMessage::new(5, GatewayBody::ListTrials).encode();
    c.send_raw(&raw).unwrap();
    let m = c.next_push(T).unwrap();
    assert_eq!(m.seq, 5);
    assert!(matches!(m.body, GatewayBody::Nack { ref reason, .. } if reason.contains("no dataset")));
}

use std::io::{Read, Write};
use std::net::TcpStream;
use std::thread;
use std::time::{Duration, Instant};

use testbed_core::daemon::server::DaemonServer;
use testbed_core::daemon::{ClockMode, DaemonConfig};
use testbed_core::model::{AttachmentKind, TestbedKind};
use testbed_core::orchestrator::link::{DaemonLink, Inbound, LinkError, TcpLink};
use testbed_core::protocol::{encode_frame, Body, Command, Decoded, FrameDecoder, Hello, NackCode, Role, WireMessage};

fn lockstep_server() -> DaemonServer {
    DaemonServer::start(DaemonConfig::sim(TestbedKind::Drawer, AttachmentKind::Handle)).unwrap()
}

/// Reads frames until `want` matches or two seconds pass.
fn read_until(stream: &mut TcpStream, dec: &mut FrameDecoder, want: impl Fn(&Decoded<WireMessage>) -> bool) -> Decoded<WireMessage> {
    stream.set_read_timeout(Some(Duration::from_millis(50))).unwrap();
    let deadline = Instant::now() + Duration::from_secs(2);
    let mut buf = [0u8; 4096];
    loop {
        while let Some(d) = dec.next_message() {
            if want(&d) {
                return d;
            }
        }
        assert!(Instant::now() < deadline, "no matching frame");
        if let Ok(n) = stream.read(&mut buf) {
            dec.push(&buf[..n]);
        }
    }
}

fn wait_for(mut cond: impl FnMut() -> bool) -> bool {
    let deadline = Instant::now() + Duration::from_secs(3);
    while Instant::now() < deadline {
        if cond() {
            return true;
        }
        thread::sleep(Duration::from_millis(10));
    }
    false
}

#[test]
fn second_control_client_is_busy() {
    let server = lockstep_server();
    let _first = TcpLink::connect(server.local_addr(), "first").unwrap();
    match TcpLink::connect(server.local_addr(), "second") {
        Err(LinkError::Protocol(m)) => assert!(m.contains("Busy"), "{m}"),
        other => panic!("expected Busy, got {:?}", other.map(|_| ())),
    }
    // Telemetry clients are not limited.
    TcpLink::connect_as(server.local_addr(), "viewer", Role::Telemetry).unwrap();
}

#[test]
fn hello_reports_daemon_identity() {
    let server = lockstep_server();
    let link = TcpLink::connect(server.local_addr(), "id").unwrap();
    assert_eq!(link.info()["testbed"], "Drawer");
    assert_eq!(link.info()["attachment"], "Handle");
    assert_eq!(link.clock(), ClockMode::Lockstep);
}

#[test]
fn malformed_bytes_get_a_nack_and_the_connection_survives() {
    let server = lockstep_server();
    let mut s = TcpStream::connect(server.local_addr()).unwrap();
    let mut dec = FrameDecoder::new();
    let hello = WireMessage::new(1, Body::Hello(Hello { role: Role::Control, client: "raw".into() }));
    s.write_all(&hello.encode()).unwrap();
    read_until(&mut s, &mut dec, |d| matches!(d, Decoded::Message(m) if m.seq == 1));

    s.write_all(&encode_frame(b"{not json")).unwrap();
    let nack = read_until(&mut s, &mut dec, |d| matches!(d, Decoded::Message(m) if matches!(m.body, Body::Nack(_))));
    let Decoded::Message(WireMessage { body: Body::Nack(n), .. }) = nack else { unreachable!() };
    assert_eq!(n.code, NackCode::Malformed);

    // A good frame ends the garbage run; a later truncated frame is reported
    // once the stall timeout passes.
    s.write_all(&WireMessage::new(5, Body::Command(Command::GetStatus)).encode()).unwrap();
    read_until(&mut s, &mut dec, |d| matches!(d, Decoded::Message(m) if m.seq == 5));
    s.write_all(&[0, 0, 0, 50, b'{']).unwrap();
    let stalled = read_until(&mut s, &mut dec, |d| matches!(d, Decoded::Message(m) if matches!(m.body, Body::Nack(_))));
    assert!(matches!(stalled, Decoded::Message(_)));

    let status = WireMessage::new(7, Body::Command(Command::GetStatus));
    s.write_all(&status.encode()).unwrap();
    let ack = read_until(&mut s, &mut dec, |d| matches!(d, Decoded::Message(m) if m.seq == 7));
    assert!(matches!(ack, Decoded::Message(WireMessage { body: Body::Ack(_), .. })));
}

#[test]
fn lockstep_time_moves_only_on_advance() {
    let server = lockstep_server();
    let mut link = TcpLink::connect(server.local_addr(), "lockstep").unwrap();
    link.request(Command::StartStream).unwrap().unwrap();
    thread::sleep(Duration::from_millis(100));
    let idle: Vec<_> = link.drain().into_iter().filter(|i| matches!(i, Inbound::Telemetry { .. })).collect();
    assert!(idle.is_empty());
    link.wait(0.5).unwrap();
    thread::sleep(Duration::from_millis(50));
    let frames: Vec<f64> = link
        .drain()
        .into_iter()
        .filter_map(|i| match i {
            Inbound::Telemetry { telemetry, .. } => Some(telemetry.frame.timestamp),
            _ => None,
        })
        .collect();
    // 100 Hz for half a second.
    assert_eq!(frames.len(), 50);
    assert!(frames.windows(2).all(|w| w[1] > w[0]));
}

#[test]
fn closing_the_control_link_releases_the_slot() {
    let server = lockstep_server();
    {
        let mut link = TcpLink::connect(server.local_addr(), "a").unwrap();
        link.request(Command::SetResistance { newtons: 10.0 }).unwrap().unwrap();
        assert!(wait_for(|| server.connection_count() == 1));
    }
    assert!(wait_for(|| server.connection_count() == 0));
    let mut link = TcpLink::connect(server.local_addr(), "b").unwrap();
    let ack = link.request(Command::GetStatus).unwrap().unwrap();
    // Losing the control client releases the brake.
    assert_eq!(ack["status"]["state"]["brake_or_magnet_engaged"], false);
}

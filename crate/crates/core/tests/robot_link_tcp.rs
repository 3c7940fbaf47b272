use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use armtalk_core::fixtures;
use armtalk_core::kinematics::fk;
use armtalk_core::planner::{generate_arc_waypoints, validate, ArcParams};
use armtalk_core::robot_link::{
    emit_script, parse_script, HaltReason, LinkError, RobotConnection, RobotScript, ScriptOptions,
    SimConfig, Simulator,
};
use armtalk_core::scene::Vec3;

const GOLDEN: &str = include_str!("golden/arc_fixture.script");

fn arc_script() -> RobotScript {
    let scene = fixtures::demo_scene();
    let chain = fixtures::demo_chain();
    let traj = generate_arc_waypoints(
        &scene,
        Vec3::new(0.5, 0.0, 0.9),
        Vec3::new(-0.5, 0.0, 0.9),
        ArcParams::default(),
    )
    .unwrap();
    let report = validate(&scene, &chain, &traj);
    emit_script(&traj, &report, &chain.base_pose, &ScriptOptions::default()).unwrap()
}

fn simulator(real_time: bool) -> Simulator {
    Simulator::new(
        fixtures::demo_chain(),
        fixtures::demo_scene(),
        SimConfig {
            real_time,
            ..SimConfig::default()
        },
    )
}

#[test]
fn golden_script_matches() {
    assert_eq!(arc_script().text, GOLDEN);
    assert_eq!(arc_script().text, arc_script().text);
}

#[test]
fn arc_program_acked_and_done() {
    let server = simulator(false).serve("127.0.0.1:0").unwrap();
    let mut conn = RobotConnection::connect(server.addr()).unwrap();
    let chain = fixtures::demo_chain();
    let mut states = Vec::new();
    let last = conn
        .run_program(&arc_script(), |s| states.push(s.clone()))
        .unwrap();
    assert_eq!(last.halted_reason, Some(HaltReason::Done));
    assert!(last.end_effector.distance(Vec3::new(-0.5, 0.0, 0.9)) <= 1e-3);
    assert!(states[..states.len() - 1].iter().all(|s| s.executing));
    assert!(!last.executing);
    for s in &states {
        assert!(fk(&chain, &s.q).distance(s.end_effector) <= 1e-9);
    }
    // The connection stays usable for another program.
    let again = conn.run_program(&arc_script(), |_| {}).unwrap();
    assert_eq!(again.halted_reason, Some(HaltReason::Done));
}

#[test]
fn malformed_move_line_is_nacked_with_line_number() {
    let server = simulator(false).serve("127.0.0.1:0").unwrap();
    let mut conn = RobotConnection::connect(server.addr()).unwrap();
    let text = "PROG bad\nMOVEL 0.5000 0.0000 0.9000 0.2500 0.0000\nMOVEL 0.5000 oops 0.9000 0.2500 0.0000\nEND\n";
    let script = RobotScript {
        name: "bad".into(),
        text: text.into(),
        move_commands: Vec::new(),
    };
    match conn.send_program(&script) {
        Err(LinkError::Nack { line, reason }) => {
            assert_eq!(line, 3);
            assert!(reason.contains("oops"), "{reason}");
        }
        other => panic!("{other:?}"),
    }
    assert!(parse_script(text).is_err());
}

#[test]
fn second_program_during_execution_is_busy() {
    let server = simulator(true).serve("127.0.0.1:0").unwrap();
    let addr = server.addr();
    let (started_tx, started_rx) = mpsc::channel();
    let runner = thread::spawn(move || {
        let mut conn = RobotConnection::connect(addr).unwrap();
        conn.send_program(&arc_script()).unwrap();
        started_tx.send(()).unwrap();
        // Drain a few states, then hang up mid-run.
        for _ in 0..5 {
            conn.next_state().unwrap();
        }
    });
    started_rx.recv_timeout(Duration::from_secs(5)).unwrap();
    let mut other = RobotConnection::connect(addr).unwrap();
    match other.send_program(&arc_script()) {
        Err(LinkError::Nack { line: 0, reason }) => assert_eq!(reason, "busy"),
        other => panic!("{other:?}"),
    }
    runner.join().unwrap();
}

#[test]
fn raw_wire_exchange() {
    let server = simulator(false).serve("127.0.0.1:0").unwrap();
    let mut stream = TcpStream::connect(server.addr()).unwrap();
    stream.write_all(b"PROG empty\nEND\n").unwrap();
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut line = String::new();
    reader.read_line(&mut line).unwrap();
    assert_eq!(line, "ACK\n");
    line.clear();
    reader.read_line(&mut line).unwrap();
    assert!(line.starts_with("STATE 0 "), "{line}");
    assert!(line.ends_with(" DONE\n"), "{line}");
}

#[test]
fn closed_connection_is_transport_error() {
    let server = simulator(false).serve("127.0.0.1:0").unwrap();
    let addr = server.addr();
    server.shutdown();
    thread::sleep(Duration::from_millis(50));
    match RobotConnection::connect(addr).and_then(|mut c| c.send_program(&arc_script())) {
        Err(LinkError::Transport(_)) => {}
        other => panic!("{other:?}"),
    }
}

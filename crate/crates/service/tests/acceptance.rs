//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use armtalk_core::animation::{
    frames_to_clip, parse_frame_format, parse_track_format, sample, DEFAULT_FRAME_INTERVAL_S,
};
use armtalk_core::fixtures;
use armtalk_core::kinematics::{error_gradient, fk, ik, IkConfig, JointConfig, KinematicChain};
use armtalk_core::llm::ReplayClient;
use armtalk_core::planner::{
    generate_arc_waypoints, validate, ArcParams, Trajectory, ValidationReport,
};
use armtalk_core::robot_link::{emit_script, parse_script, RobotState, ScriptOptions};
use armtalk_core::scene::{BasePose, ObjectRole, ReachabilitySphere, Scene, SceneObject, Vec3};
use armtalk_core::session::{
    PlanContext, PlanMode, PlanSession, RobotPort, SessionError, SessionStatus,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("planner-fixture", planner_fixture),
        ("planner-validator-closure", planner_validator_closure),
        ("ik-round-trip", ik_round_trip),
        ("animation-parsing", animation_parsing),
        ("animation-sampling", animation_sampling),
        ("wire-round-trip", wire_round_trip),
        ("end-to-end-simulated", end_to_end),
        ("orchestrator-determinism", orchestrator_determinism),
        ("session-safety", session_safety),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let started = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name} ({secs:.2}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name} ({secs:.2}s): {detail}");
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}

fn planner_fixture() -> Outcome {
    let scene = fixtures::demo_scene();
    let (start, end) = (Vec3::new(0.5, 0.0, 0.9), Vec3::new(-0.5, 0.0, 0.9));
    let t0 = Instant::now();
    let traj = generate_arc_waypoints(&scene, start, end, ArcParams::default())
        .map_err(|e| e.to_string())?;
    let elapsed = t0.elapsed();
    // Interior points: lerp, then lift to the table top (1.0) plus 0.1.
    let expected = [
        start,
        Vec3::new(0.25, 0.0, 1.1),
        Vec3::new(0.0, 0.0, 1.1),
        Vec3::new(-0.25, 0.0, 1.1),
        end,
    ];
    let err = traj
        .positions()
        .zip(expected)
        .map(|(a, b)| a.distance(b))
        .fold(0.0, f64::max);
    check(
        traj.len() == 5 && err <= 1e-9 && elapsed < Duration::from_millis(1),
        format!(
            "{} waypoints, max error {err:.1e} m, {:.1} us",
            traj.len(),
            elapsed.as_secs_f64() * 1e6
        ),
    )
}

/// Random scene whose target tops are clear and whose lifted arc stays inside the sphere.
fn random_scene(rng: &mut ChaCha8Rng) -> (Scene, Vec3, Vec3) {
    loop {
        let yaw = rng.gen_range(-3.0..3.0);
        let mut objects = vec![SceneObject::new(
            "Robot",
            ObjectRole::Robot,
            Vec3::new(0.0, 0.0, 0.09),
            Vec3::new(0.1, 0.1, 0.09),
        )];
        let a0 = rng.gen_range(0.0..TAU);
        let a1 = a0 + rng.gen_range(0.7..(TAU - 0.7));
        for (name, angle) in [("Pad_A", a0), ("Pad_B", a1)] {
            let r = rng.gen_range(0.45..0.85);
            let top = rng.gen_range(0.3..0.9);
            let half = rng.gen_range(0.05..0.12);
            objects.push(SceneObject::new(
                name,
                ObjectRole::TargetSurface,
                Vec3::new(r * angle.cos(), r * angle.sin(), top / 2.0),
                Vec3::new(half, half, top / 2.0),
            ));
        }
        let start = objects[1].top_center();
        let end = objects[2].top_center();
        for i in 0..rng.gen_range(0..4) {
            let r = rng.gen_range(0.3..1.1);
            let angle = rng.gen_range(0.0..TAU);
            let top = rng.gen_range(0.2..1.0);
            objects.push(SceneObject::new(
                format!("Box_{i}"),
                ObjectRole::Obstacle,
                Vec3::new(r * angle.cos(), r * angle.sin(), top / 2.0),
                Vec3::new(
                    rng.gen_range(0.05..0.3),
                    rng.gen_range(0.05..0.3),
                    top / 2.0,
                ),
            ));
        }
        objects.push(SceneObject::new(
            "Marker",
            ObjectRole::Marker,
            Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 0.5),
            Vec3::new(0.1, 0.1, 0.1),
        ));
        let blocked = |p: Vec3, own: &str| {
            objects
                .iter()
                .any(|o| o.role.is_solid() && o.name != own && o.bounds.contains(p))
        };
        if blocked(start, "Pad_A") || blocked(end, "Pad_B") {
            continue;
        }
        let lifted = objects
            .iter()
            .filter(|o| o.role.is_solid())
            .map(|o| o.bounds.max().z)
            .fold(f64::MIN, f64::max)
            + 0.1;
        let in_sphere = (1..4).all(|i| {
            let mut p = start.lerp(end, i as f64 / 4.0);
            p.z = lifted;
            p.norm() <= 1.3
        });
        if !in_sphere {
            continue;
        }
        let base = BasePose {
            position: Vec3::ZERO,
            yaw,
        };
        let scene = Scene::new(objects, ReachabilitySphere::new(Vec3::ZERO, 1.3), base)
            .expect("generated scene is well formed");
        return (scene, start, end);
    }
}

struct Planned {
    scene: Scene,
    traj: Trajectory,
    report: ValidationReport,
}

fn planned_random_scenes(seed: u64, n: usize, chain: &KinematicChain) -> Vec<Planned> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let (scene, start, end) = random_scene(&mut rng);
            let chain = chain.clone().with_base_pose(scene.base_pose);
            let traj = generate_arc_waypoints(&scene, start, end, ArcParams::default())
                .expect("endpoints in sphere");
            let report = validate(&scene, &chain, &traj);
            Planned {
                scene,
                traj,
                report,
            }
        })
        .collect()
}

fn planner_validator_closure() -> Outcome {
    let chain = fixtures::demo_chain();
    let t0 = Instant::now();
    let runs = planned_random_scenes(1, 1000, &chain);
    let elapsed = t0.elapsed();
    let bad: Vec<String> = runs
        .iter()
        .filter(|r| !r.report.overall)
        .take(3)
        .map(|r| r.report.problems().join("; "))
        .collect();
    let ok = runs.iter().filter(|r| r.report.overall).count();
    check(
        ok == 1000 && elapsed < Duration::from_secs(5),
        format!(
            "{ok}/1000 overall=true in {:.2}s {bad:?}",
            elapsed.as_secs_f64()
        ),
    )
}

fn random_q(chain: &KinematicChain, rng: &mut ChaCha8Rng) -> JointConfig {
    chain.lerp_limits(std::array::from_fn(|_| rng.gen::<f64>()))
}

/// Position of the flange from standard DH homogeneous transforms.
fn oracle_fk(chain: &KinematicChain, q: &JointConfig) -> Vec3 {
    let mut rot = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let mut pos = [0.0; 3];
    for (j, theta) in chain.joints().iter().zip(q.iter()) {
        let (ct, st) = (theta.cos(), theta.sin());
        let (ca, sa) = (j.dh_alpha.cos(), j.dh_alpha.sin());
        let local_rot = [
            [ct, -st * ca, st * sa],
            [st, ct * ca, -ct * sa],
            [0.0, sa, ca],
        ];
        let local_pos = [j.dh_a * ct, j.dh_a * st, j.dh_d];
        for (i, p) in pos.iter_mut().enumerate() {
            *p += (0..3).map(|k| rot[i][k] * local_pos[k]).sum::<f64>();
        }
        let mut next = [[0.0; 3]; 3];
        for i in 0..3 {
            for k in 0..3 {
                next[i][k] = (0..3).map(|m| rot[i][m] * local_rot[m][k]).sum();
            }
        }
        rot = next;
    }
    Vec3::new(pos[0], pos[1], pos[2])
}

fn ik_round_trip() -> Outcome {
    let chain = fixtures::demo_chain();
    let cfg = IkConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut converged = 0;
    for _ in 0..100 {
        let target = oracle_fk(&chain, &random_q(&chain, &mut rng));
        if let Ok(sol) = ik(&chain, target, &JointConfig::HOME, &cfg) {
            if sol.converged
                && sol.iterations <= 2000
                && fk(&chain, &sol.q).distance(target) <= 1e-3
            {
                converged += 1;
            }
        }
    }
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let q = random_q(&chain, &mut rng);
        let target = oracle_fk(&chain, &random_q(&chain, &mut rng));
        let forward = error_gradient(&chain, &q, target, cfg.fd_step);
        let h = 1e-6;
        let central: Vec<f64> = (0..6)
            .map(|i| {
                let (mut lo, mut hi) = (q, q);
                lo[i] -= h;
                hi[i] += h;
                let e = |c: &JointConfig| (oracle_fk(&chain, c) - target).norm_squared();
                (e(&hi) - e(&lo)) / (2.0 * h)
            })
            .collect();
        let diff = forward
            .iter()
            .zip(&central)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm = central.iter().map(|v| v * v).sum::<f64>().sqrt();
        worst = worst.max(diff / norm);
    }
    check(
        converged >= 95 && worst <= 1e-3,
        format!("{converged}/100 converged, worst gradient relative error {worst:.2e}"),
    )
}

fn animation_parsing() -> Outcome {
    let keys = |text: &str, joint: usize| -> Result<Vec<(f64, f64)>, String> {
        let clip = parse_track_format(text).map_err(|e| e.to_string())?;
        let track = clip.track(joint).ok_or("missing track")?;
        Ok(track.keys().iter().map(|k| (k.time, k.rotation)).collect())
    };
    let elbow = keys(fixtures::BOW_ANIM, 2)?;
    let bow_ok = elbow
        == vec![
            (0.000, 0.000),
            (1.020, -0.472),
            (2.020, -1.519),
            (3.020, -2.089),
            (4.020, -1.358),
            (5.020, -0.315),
        ];
    let wrist2 = keys(fixtures::SHAKE_ANIM, 4)?;
    let shake_ok = wrist2 == vec![(0.000, 1.172), (1.000, 1.612), (2.000, 1.752)];
    let yes = parse_frame_format(fixtures::YES_FRAMES, DEFAULT_FRAME_INTERVAL_S)
        .map_err(|e| e.to_string())?;
    let yes_ok = yes.frames.len() == 8 && yes.frames[1] == [0.0, 0.0, 1.0, 0.0, 0.0, 0.0];
    check(
        bow_ok && shake_ok && yes_ok,
        format!(
            "bow elbow {:?}, shake wrist-2 {:?}, yes {} frames, frame 2 {:?}",
            elbow.get(2),
            wrist2.get(1),
            yes.frames.len(),
            yes.frames.get(1)
        ),
    )
}

fn animation_sampling() -> Outcome {
    let clip = parse_track_format(fixtures::BOW_ANIM).map_err(|e| e.to_string())?;
    let chain = fixtures::demo_chain();
    let v = sample(&clip, &chain, 0.51)[2];
    // Halfway between (0.000, 0.000) and (1.020, -0.472).
    let expected = -0.472 * 0.51 / 1.02;
    let frames = frames_to_clip(
        &parse_frame_format(fixtures::YES_FRAMES, DEFAULT_FRAME_INTERVAL_S)
            .map_err(|e| e.to_string())?,
    );
    let frame_ok = sample(&frames, &chain, DEFAULT_FRAME_INTERVAL_S)[2] == 1.0;
    check(
        (v - expected).abs() <= 1e-6 && (v + 0.236).abs() <= 1e-6 && frame_ok,
        format!("elbow at 0.51 s = {v:.9}"),
    )
}

fn wire_round_trip() -> Outcome {
    let chain = fixtures::demo_chain();
    let opts = ScriptOptions::default();
    let runs = planned_random_scenes(3, 500, &chain);
    let mut identical = 0;
    let mut checked = 0;
    for Planned {
        scene,
        traj,
        report,
    } in &runs
    {
        if !report.overall {
            continue;
        }
        checked += 1;
        let script =
            emit_script(traj, report, &scene.base_pose, &opts).map_err(|e| e.to_string())?;
        let parsed = parse_script(&script.text).map_err(|e| e.to_string())?;
        if parsed == script && parsed.move_commands.len() == traj.len() {
            identical += 1;
        }
    }

    let golden = std::fs::read_to_string(core_path("tests/golden/arc_fixture.script"))
        .map_err(|e| e.to_string())?;
    let scene = fixtures::demo_scene();
    let golden_runs: Vec<String> = (0..2)
        .map(|_| {
            let traj = generate_arc_waypoints(
                &scene,
                Vec3::new(0.5, 0.0, 0.9),
                Vec3::new(-0.5, 0.0, 0.9),
                ArcParams::default(),
            )
            .unwrap();
            let report = validate(&scene, &chain, &traj);
            emit_script(&traj, &report, &scene.base_pose, &opts)
                .unwrap()
                .text
        })
        .collect();
    let golden_ok = golden_runs.iter().all(|t| *t == golden);
    check(
        checked == 500 && identical == 500 && golden_ok,
        format!("{identical}/{checked} identical, golden match {golden_ok}"),
    )
}

fn core_path(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core")
        .join(rel)
}

fn cli_run(scene: &str, extra: &[&str]) -> Result<(i32, tempfile::TempDir), String> {
    let out = tempfile::tempdir().map_err(|e| e.to_string())?;
    let scene = core_path(&format!("fixtures/{scene}"));
    let o = Command::new(env!("CARGO_BIN_EXE_armtalk"))
        .args(["run", "--scene"])
        .arg(&scene)
        .args([
            "--instruction",
            "Create a pick-and-place program between Stool_1 and Stool_2",
            "--mode",
            "reference",
            "--yes",
            "--sim-port",
            "0",
            "--out",
        ])
        .arg(out.path())
        .args(extra)
        .output()
        .map_err(|e| e.to_string())?;
    Ok((o.status.code().unwrap_or(-1), out))
}

fn end_to_end() -> Outcome {
    let t0 = Instant::now();
    let (code, out) = cli_run("demo_scene.json", &[])?;
    let elapsed = t0.elapsed();
    let log = std::fs::read_to_string(out.path().join("states.log")).map_err(|e| e.to_string())?;
    let last =
        RobotState::from_line(log.lines().last().unwrap_or_default()).map_err(|e| e.to_string())?;
    let dist = last.end_effector.distance(Vec3::new(-0.5, 0.0, 0.9));
    let done = last.halted_reason == Some(armtalk_core::robot_link::HaltReason::Done);

    let intruder = core_path("fixtures/demo_scene_intruder.json");
    let (halt_code, _) = cli_run(
        "demo_scene.json",
        &["--sim-scene", intruder.to_str().unwrap()],
    )?;
    check(
        code == 0 && done && dist <= 1e-3 && halt_code != 0 && elapsed < Duration::from_secs(10),
        format!(
            "exit {code}, done {done}, final error {dist:.2e} m in {:.2}s; intruder exit {halt_code}",
            elapsed.as_secs_f64()
        ),
    )
}

fn orchestrator_determinism() -> Outcome {
    let scene = fixtures::demo_scene();
    let chain = fixtures::demo_chain();
    let replay = fixtures::demo_replay();
    let mut mismatches = 0;
    let mut runs = 0;
    for entry in &replay.entries {
        let instruction = entry
            .instruction
            .as_deref()
            .ok_or("entry without instruction")?;
        let mut first: Option<(String, Vec<u64>)> = None;
        for _ in 0..10 {
            let mut client = ReplayClient::new(&replay);
            let mut session =
                PlanSession::create("demo", instruction).map_err(|e| e.to_string())?;
            session
                .plan(
                    PlanMode::Llm,
                    &mut PlanContext::new(&scene, &chain).with_llm(&mut client),
                )
                .map_err(|e| e.to_string())?;
            let traj = session.candidate().ok_or("no candidate")?;
            let bits: Vec<u64> = traj
                .positions()
                .flat_map(|p| p.to_array())
                .map(f64::to_bits)
                .collect();
            let this = (traj.to_json(), bits);
            runs += 1;
            match &first {
                None => first = Some(this),
                Some(f) if *f != this => mismatches += 1,
                Some(_) => {}
            }
        }
    }
    check(
        mismatches == 0 && runs == 10 * replay.entries.len(),
        format!(
            "{runs} runs over {} replay entries, {mismatches} differing",
            replay.entries.len()
        ),
    )
}

struct CountingRobot {
    calls: usize,
}

impl RobotPort for CountingRobot {
    fn run(
        &mut self,
        script: &armtalk_core::robot_link::RobotScript,
        _: &mut dyn FnMut(&RobotState),
    ) -> Result<RobotState, armtalk_core::robot_link::LinkError> {
        self.calls += 1;
        let end = script.move_commands.last().map_or(Vec3::ZERO, |c| c.target);
        Ok(RobotState {
            t: 0.0,
            q: JointConfig::HOME,
            end_effector: end,
            executing: false,
            halted_reason: Some(armtalk_core::robot_link::HaltReason::Done),
        })
    }
}

fn session_safety() -> Outcome {
    let scene = fixtures::demo_scene();
    let chain = fixtures::demo_chain();
    let opts = ScriptOptions::default();
    let palette = [
        Vec3::new(0.0, 0.0, 1.2),
        Vec3::new(0.0, 0.6, 0.5),
        Vec3::new(0.0, 0.0, 2.0),
        Vec3::new(0.25, 0.0, 1.1),
        Vec3::new(0.5, 0.0, 0.95),
    ];
    let instructions = ["move between Stool_1 and Stool_2", "do a flip"];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut unapproved_runs, mut bad_approvals, mut executions, mut approvals) = (0, 0, 0, 0);
    for _ in 0..10_000 {
        let instruction = instructions[usize::from(rng.gen_bool(0.05))];
        let mut s = PlanSession::create("demo", instruction).map_err(|e| e.to_string())?;
        for _ in 0..rng.gen_range(0..12) {
            let before_status = s.status();
            let before_overall = s.report().is_some_and(|r| r.overall);
            match rng.gen_range(0..4) {
                0 => {
                    let _ = s.plan(PlanMode::Reference, &mut PlanContext::new(&scene, &chain));
                }
                1 => {
                    let index = rng.gen_range(0..6);
                    let p = palette[rng.gen_range(0..palette.len())];
                    let _ = s.edit_waypoint(index, p, &scene, &chain);
                }
                2 => {
                    if s.approve().is_ok() {
                        approvals += 1;
                        if !before_overall {
                            bad_approvals += 1;
                        }
                    }
                }
                _ => {
                    let mut robot = CountingRobot { calls: 0 };
                    let r = s.execute(&mut robot, &scene, &opts, &mut |_| {});
                    if robot.calls > 0 {
                        executions += 1;
                        if before_status != SessionStatus::Approved || !before_overall {
                            unapproved_runs += 1;
                        }
                    } else if !matches!(r, Err(SessionError::WrongState { .. })) {
                        unapproved_runs += 1;
                    }
                }
            }
        }
    }
    check(
        unapproved_runs == 0 && bad_approvals == 0,
        format!(
            "10000 sequences: {executions} executions, {approvals} approvals, \
             {unapproved_runs} unapproved executions, {bad_approvals} approvals of failing candidates"
        ),
    )
}

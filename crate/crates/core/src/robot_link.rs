//! Robot script emission, the line protocol to the controller, and a
//! simulated controller that executes programs and streams joint states.
//!
//! Wire grammar (one record per line, `\n` terminated):
//!
//! ```text
//! PROG <name>
//! MOVEL <x> <y> <z> <speed> <blend>      (repeated, 4-decimal fixed)
//! END
//! ```
//!
//! The controller answers `ACK` or `NACK <line> <reason>`, then streams
//! `STATE <t> <q1..q6> <x> <y> <z> <flag>` records on the same connection
//! until a terminal flag. Script coordinates are in the robot base frame.

use std::fmt::{self, Write as _};
use std::io::{self, BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{self, fk, IkConfig, JointConfig, KinematicChain, JOINT_COUNT};
use crate::planner::{Trajectory, ValidationReport};
use crate::scene::{BasePose, ObjectRole, Scene, Vec3};

pub const DEFAULT_SPEED_MPS: f64 = 0.25;
pub const DEFAULT_BLEND_M: f64 = 0.0;
pub const DEFAULT_PORT: u16 = 30001;
pub const DEFAULT_TICK_HZ: f64 = 125.0;
pub const DEFAULT_PROGRAM_NAME: &str = "waypoints";
/// Distance at which the final waypoint counts as reached.
pub const ARRIVAL_TOLERANCE_M: f64 = 1e-3;
/// Base-frame point the simulator starts above: clear of the demo furniture.
pub const READY_POINT: Vec3 = Vec3::new(0.0, -0.3, 1.0);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinkError {
    #[error("trajectory has not passed validation")]
    UnvalidatedTrajectory,
    #[error("invalid script option: {0}")]
    InvalidOption(String),
    #[error("script line {line}: {reason}")]
    Script { line: usize, reason: String },
    #[error("transport: {0}")]
    Transport(String),
    #[error("controller rejected program at line {line}: {reason}")]
    Nack { line: usize, reason: String },
    #[error("protocol: {0}")]
    Protocol(String),
}

impl From<io::Error> for LinkError {
    fn from(e: io::Error) -> Self {
        LinkError::Transport(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MoveCommand {
    pub target: Vec3,
    /// Meters per second.
    pub speed: f64,
    /// Meters.
    pub blend: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobotScript {
    pub name: String,
    pub text: String,
    pub move_commands: Vec<MoveCommand>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScriptOptions {
    pub name: String,
    pub speed: f64,
    pub blend: f64,
}

impl Default for ScriptOptions {
    fn default() -> Self {
        Self {
            name: DEFAULT_PROGRAM_NAME.to_string(),
            speed: DEFAULT_SPEED_MPS,
            blend: DEFAULT_BLEND_M,
        }
    }
}

/// Fixed 4-decimal formatting with negative zero printed as zero.
pub fn fmt4(v: f64) -> String {
    let s = format!("{v:.4}");
    if s.trim_start_matches('-')
        .bytes()
        .all(|b| b == b'0' || b == b'.')
    {
        s.trim_start_matches('-').to_string()
    } else {
        s
    }
}

fn check_name(name: &str) -> Result<(), String> {
    if name.is_empty() || name.chars().any(char::is_whitespace) {
        return Err(format!(
            "program name `{name}` must be non-empty without whitespace"
        ));
    }
    Ok(())
}

fn check_motion(speed: f64, blend: f64) -> Result<(), String> {
    if !(speed.is_finite() && speed > 0.0) {
        return Err(format!("speed must be positive, got {speed}"));
    }
    if !(blend.is_finite() && blend >= 0.0) {
        return Err(format!("blend must be non-negative, got {blend}"));
    }
    Ok(())
}

/// Renders commands in the wire grammar. Values are rounded to 4 decimals.
pub fn render_program(name: &str, commands: &[MoveCommand]) -> String {
    let mut text = format!("PROG {name}\n");
    for c in commands {
        let _ = writeln!(
            text,
            "MOVEL {} {} {} {} {}",
            fmt4(c.target.x),
            fmt4(c.target.y),
            fmt4(c.target.z),
            fmt4(c.speed),
            fmt4(c.blend)
        );
    }
    text.push_str("END\n");
    text
}

/// Builds the program for a trajectory whose report passed. Waypoints are
/// converted into the robot base frame.
pub fn emit_script(
    traj: &Trajectory,
    report: &ValidationReport,
    base_pose: &BasePose,
    opts: &ScriptOptions,
) -> Result<RobotScript, LinkError> {
    if traj.is_empty() || !report.overall || report.waypoints.len() != traj.len() {
        return Err(LinkError::UnvalidatedTrajectory);
    }
    check_name(&opts.name).map_err(LinkError::InvalidOption)?;
    check_motion(opts.speed, opts.blend).map_err(LinkError::InvalidOption)?;
    let rounded = |v: f64| fmt4(v).parse::<f64>().expect("fixed output parses");
    check_motion(rounded(opts.speed), rounded(opts.blend)).map_err(LinkError::InvalidOption)?;
    let commands: Vec<MoveCommand> = traj
        .positions()
        .map(|p| MoveCommand {
            target: base_pose.to_base(p),
            speed: opts.speed,
            blend: opts.blend,
        })
        .collect();
    // Store what the text encodes so emit and parse agree exactly.
    Ok(parse_script(&render_program(&opts.name, &commands)).expect("rendered program parses"))
}

fn script_err(line: usize, reason: impl Into<String>) -> LinkError {
    LinkError::Script {
        line,
        reason: reason.into(),
    }
}

/// Accepts only the canonical 4-decimal spelling, so text is always
/// regenerable from the parsed values.
fn parse_fixed(token: &str, line: usize) -> Result<f64, LinkError> {
    let v: f64 = token
        .parse()
        .map_err(|_| script_err(line, format!("`{token}` is not a number")))?;
    if !v.is_finite() || fmt4(v) != token {
        return Err(script_err(
            line,
            format!("`{token}` is not a 4-decimal fixed number"),
        ));
    }
    Ok(v)
}

/// Parses a complete program. Line numbers in errors are 1-based.
pub fn parse_script(text: &str) -> Result<RobotScript, LinkError> {
    if !text.ends_with('\n') {
        return Err(script_err(
            text.lines().count().max(1),
            "missing final newline",
        ));
    }
    let lines: Vec<&str> = text[..text.len() - 1].split('\n').collect();
    let header = lines[0];
    let name = header
        .strip_prefix("PROG ")
        .ok_or_else(|| script_err(1, "expected `PROG <name>`"))?;
    check_name(name).map_err(|r| script_err(1, r))?;
    let footer = lines.len();
    if footer < 2 || lines[footer - 1] != "END" {
        return Err(script_err(footer, "expected `END`"));
    }
    let mut move_commands = Vec::with_capacity(footer - 2);
    for (i, line) in lines[1..footer - 1].iter().enumerate() {
        let line_no = i + 2;
        let mut parts = line.split(' ');
        if parts.next() != Some("MOVEL") {
            return Err(script_err(line_no, "expected `MOVEL`"));
        }
        let fields: Vec<&str> = parts.collect();
        if fields.len() != 5 {
            return Err(script_err(
                line_no,
                format!("MOVEL takes 5 values, got {}", fields.len()),
            ));
        }
        let mut v = [0.0; 5];
        for (slot, f) in v.iter_mut().zip(&fields) {
            *slot = parse_fixed(f, line_no)?;
        }
        check_motion(v[3], v[4]).map_err(|r| script_err(line_no, r))?;
        move_commands.push(MoveCommand {
            target: Vec3::new(v[0], v[1], v[2]),
            speed: v[3],
            blend: v[4],
        });
    }
    Ok(RobotScript {
        name: name.to_string(),
        text: text.to_string(),
        move_commands,
    })
}

// ---------------------------------------------------------------------------
// State records

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HaltReason {
    Done,
    Collision,
    ProtocolError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    /// Seconds since the program was acknowledged.
    pub t: f64,
    pub q: JointConfig,
    /// Tool position in the base frame.
    pub end_effector: Vec3,
    pub executing: bool,
    pub halted_reason: Option<HaltReason>,
}

impl RobotState {
    fn flag(&self) -> &'static str {
        match self.halted_reason {
            None => "RUN",
            Some(HaltReason::Done) => "DONE",
            Some(HaltReason::Collision) => "COLLISION",
            Some(HaltReason::ProtocolError) => "PROTOCOL_ERROR",
        }
    }

    pub fn is_terminal(&self) -> bool {
        self.halted_reason.is_some()
    }

    /// `STATE ...` record without the trailing newline. Floats use the
    /// shortest representation that reads back exactly.
    pub fn to_line(&self) -> String {
        let mut s = format!("STATE {}", self.t);
        for v in self.q.iter() {
            let _ = write!(s, " {v}");
        }
        let p = self.end_effector;
        let _ = write!(s, " {} {} {} {}", p.x, p.y, p.z, self.flag());
        s
    }

    pub fn from_line(line: &str) -> Result<Self, LinkError> {
        let bad = |m: &str| LinkError::Protocol(format!("{m} in `{line}`"));
        let parts: Vec<&str> = line.trim_end_matches('\n').split(' ').collect();
        if parts.len() != 12 || parts[0] != "STATE" {
            return Err(bad("malformed state record"));
        }
        let mut nums = [0.0; 10];
        for (slot, p) in nums.iter_mut().zip(&parts[1..11]) {
            *slot = p.parse().map_err(|_| bad("bad number"))?;
        }
        let halted_reason = match parts[11] {
            "RUN" => None,
            "DONE" => Some(HaltReason::Done),
            "COLLISION" => Some(HaltReason::Collision),
            "PROTOCOL_ERROR" => Some(HaltReason::ProtocolError),
            _ => return Err(bad("unknown flag")),
        };
        let mut q = [0.0; JOINT_COUNT];
        q.copy_from_slice(&nums[1..7]);
        Ok(Self {
            t: nums[0],
            q: JointConfig(q),
            end_effector: Vec3::new(nums[7], nums[8], nums[9]),
            executing: halted_reason.is_none(),
            halted_reason,
        })
    }
}

impl fmt::Display for RobotState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_line())
    }
}

// ---------------------------------------------------------------------------
// Simulated controller

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub tick_hz: f64,
    /// Joint pose at power-on. `None` means the pose reaching [`READY_POINT`].
    pub start_q: Option<JointConfig>,
    /// Per-tick tracking solver; tighter than validation so arrivals land well inside 1 mm.
    pub ik: IkConfig,
    /// Sleep one tick period per tick instead of running flat out.
    pub real_time: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            tick_hz: DEFAULT_TICK_HZ,
            start_q: None,
            ik: IkConfig {
                tol_m: 1e-4,
                ..IkConfig::default()
            },
            real_time: false,
        }
    }
}

/// Joint pose whose tool sits at [`READY_POINT`], solved from home.
pub fn ready_pose(chain: &KinematicChain) -> JointConfig {
    match kinematics::ik(
        chain,
        READY_POINT,
        &JointConfig::HOME,
        &IkConfig {
            tol_m: 1e-5,
            ..IkConfig::default()
        },
    ) {
        Ok(sol) => sol.q,
        Err(_) => JointConfig::HOME,
    }
}

#[derive(Debug)]
struct SimShared {
    q: JointConfig,
    busy: bool,
}

/// Executes programs against its own copy of the physical scene, which may
/// contain obstacles the planner never saw.
#[derive(Debug, Clone)]
pub struct Simulator {
    chain: KinematicChain,
    scene: Scene,
    config: SimConfig,
    shared: Arc<Mutex<SimShared>>,
}

impl Simulator {
    pub fn new(chain: KinematicChain, scene: Scene, config: SimConfig) -> Self {
        let q = config.start_q.unwrap_or_else(|| ready_pose(&chain));
        Self {
            chain,
            scene,
            config,
            shared: Arc::new(Mutex::new(SimShared { q, busy: false })),
        }
    }

    pub fn chain(&self) -> &KinematicChain {
        &self.chain
    }

    pub fn current_q(&self) -> JointConfig {
        self.shared.lock().expect("sim lock").q
    }

    /// Claims the arm. Returns false while another program runs.
    fn try_claim(&self) -> bool {
        let mut s = self.shared.lock().expect("sim lock");
        !std::mem::replace(&mut s.busy, true)
    }

    fn release(&self, q: JointConfig) {
        let mut s = self.shared.lock().expect("sim lock");
        s.q = q;
        s.busy = false;
    }

    fn collides(&self, base_point: Vec3) -> bool {
        let world = self.chain.base_pose.to_world(base_point);
        self.scene
            .with_role(ObjectRole::Obstacle)
            .any(|o| o.bounds.contains(world))
    }

    fn state(&self, t: f64, q: JointConfig, halted: Option<HaltReason>) -> RobotState {
        RobotState {
            t,
            q,
            end_effector: fk(&self.chain, &q),
            executing: halted.is_none(),
            halted_reason: halted,
        }
    }

    /// Runs one program, handing every state to `sink` in time order. The
    /// last state handed over is terminal and is also returned. Callers
    /// must hold the arm (see [`Simulator::run`]).
    fn execute_claimed(
        &self,
        commands: &[MoveCommand],
        sink: &mut dyn FnMut(&RobotState) -> bool,
    ) -> RobotState {
        let mut q = self.current_q();
        let dt = 1.0 / self.config.tick_hz;
        let mut tick = 0u64;
        let mut emit = |st: RobotState| -> Option<RobotState> {
            if self.config.real_time && st.t > 0.0 {
                thread::sleep(Duration::from_secs_f64(dt));
            }
            let keep_going = sink(&st);
            if st.is_terminal() || !keep_going {
                Some(st)
            } else {
                None
            }
        };

        if commands.is_empty() {
            let st = self.state(0.0, q, Some(HaltReason::Done));
            emit(st.clone());
            return st;
        }
        if let Some(st) = emit(self.state(0.0, q, None)) {
            return st;
        }
        let mut commanded = fk(&self.chain, &q);
        let last_index = commands.len() - 1;
        for (ci, cmd) in commands.iter().enumerate() {
            let step = cmd.speed * dt;
            loop {
                let remaining = cmd.target - commanded;
                let dist = remaining.norm();
                if dist == 0.0 {
                    break;
                }
                commanded = if dist <= step {
                    cmd.target
                } else {
                    commanded + remaining * (step / dist)
                };
                tick += 1;
                let mut halted = match kinematics::ik(&self.chain, commanded, &q, &self.config.ik) {
                    Ok(sol) if sol.converged => {
                        q = sol.q;
                        self.collides(fk(&self.chain, &q))
                            .then_some(HaltReason::Collision)
                    }
                    Ok(sol) => {
                        q = sol.q;
                        Some(HaltReason::ProtocolError)
                    }
                    Err(_) => Some(HaltReason::ProtocolError),
                };
                if halted.is_none() && ci == last_index && commanded == cmd.target {
                    halted = Some(self.arrival(&q, cmd.target));
                }
                if let Some(st) = emit(self.state(tick as f64 * dt, q, halted)) {
                    return st;
                }
            }
        }
        // Already at the final target before moving.
        let target = commands[last_index].target;
        let st = self.state((tick + 1) as f64 * dt, q, Some(self.arrival(&q, target)));
        emit(st.clone());
        st
    }

    fn arrival(&self, q: &JointConfig, target: Vec3) -> HaltReason {
        if fk(&self.chain, q).distance(target) <= ARRIVAL_TOLERANCE_M {
            HaltReason::Done
        } else {
            HaltReason::ProtocolError
        }
    }

    /// Runs a program directly, without the network. `None` if the arm is busy.
    pub fn run(
        &self,
        commands: &[MoveCommand],
        mut sink: impl FnMut(&RobotState),
    ) -> Option<RobotState> {
        if !self.try_claim() {
            return None;
        }
        let last = self.execute_claimed(commands, &mut |s| {
            sink(s);
            true
        });
        self.release(last.q);
        Some(last)
    }

    /// Serves the line protocol on `addr` (port 0 picks a free port).
    pub fn serve(self, addr: impl ToSocketAddrs) -> io::Result<SimServer> {
        let listener = TcpListener::bind(addr)?;
        let local = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let stop_flag = Arc::clone(&stop);
        let handle = thread::spawn(move || {
            for conn in listener.incoming() {
                if stop_flag.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(conn) = conn else { continue };
                let sim = self.clone();
                thread::spawn(move || {
                    let _ = sim.handle_connection(conn);
                });
            }
        });
        Ok(SimServer {
            addr: local,
            stop,
            handle: Some(handle),
        })
    }

    fn handle_connection(&self, conn: TcpStream) -> io::Result<()> {
        conn.set_nodelay(true)?;
        let mut reader = BufReader::new(conn.try_clone()?);
        let mut writer = io::BufWriter::new(conn);
        loop {
            let mut program = String::new();
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line)? == 0 {
                    return Ok(());
                }
                let is_end = line.trim_end_matches('\n') == "END";
                program.push_str(&line);
                if is_end {
                    break;
                }
            }
            let script = match parse_script(&program) {
                Ok(s) => s,
                Err(LinkError::Script { line, reason }) => {
                    writeln!(writer, "NACK {line} {reason}")?;
                    writer.flush()?;
                    continue;
                }
                Err(e) => {
                    writeln!(writer, "NACK 0 {e}")?;
                    writer.flush()?;
                    continue;
                }
            };
            if !self.try_claim() {
                writeln!(writer, "NACK 0 busy")?;
                writer.flush()?;
                continue;
            }
            let mut write_ok = true;
            let ack = writer.write_all(b"ACK\n").and_then(|_| writer.flush());
            let last = if ack.is_ok() {
                self.execute_claimed(&script.move_commands, &mut |st| {
                    let line = format!("{}\n", st.to_line());
                    write_ok = writer
                        .write_all(line.as_bytes())
                        .and_then(|_| writer.flush())
                        .is_ok();
                    write_ok
                })
            } else {
                write_ok = false;
                self.state(0.0, self.current_q(), Some(HaltReason::ProtocolError))
            };
            self.release(last.q);
            if !write_ok {
                return Ok(());
            }
        }
    }
}

/// Handle to a running simulator listener.
#[derive(Debug)]
pub struct SimServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl SimServer {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) {
        self.stop_listener();
    }

    fn stop_listener(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the accept loop.
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for SimServer {
    fn drop(&mut self) {
        self.stop_listener();
    }
}

// ---------------------------------------------------------------------------
// Client

/// One connection to a controller.
#[derive(Debug)]
pub struct RobotConnection {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl RobotConnection {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self, LinkError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(Self {
            reader: BufReader::new(stream.try_clone()?),
            writer: stream,
        })
    }

    fn read_line(&mut self) -> Result<String, LinkError> {
        let mut line = String::new();
        if self.reader.read_line(&mut line)? == 0 {
            return Err(LinkError::Transport(
                "connection closed by controller".into(),
            ));
        }
        Ok(line.trim_end_matches('\n').to_string())
    }

    /// Uploads the program and waits for the controller's verdict.
    pub fn send_program(&mut self, script: &RobotScript) -> Result<(), LinkError> {
        self.writer.write_all(script.text.as_bytes())?;
        self.writer.flush()?;
        let reply = self.read_line()?;
        if reply == "ACK" {
            return Ok(());
        }
        let nack = reply
            .strip_prefix("NACK ")
            .ok_or_else(|| LinkError::Protocol(format!("unexpected reply `{reply}`")))?;
        let (line, reason) = nack.split_once(' ').unwrap_or((nack, ""));
        let line = line
            .parse()
            .map_err(|_| LinkError::Protocol(format!("unexpected reply `{reply}`")))?;
        Err(LinkError::Nack {
            line,
            reason: reason.to_string(),
        })
    }

    pub fn next_state(&mut self) -> Result<RobotState, LinkError> {
        let line = self.read_line()?;
        RobotState::from_line(&line)
    }

    /// Sends a program and relays every state until the terminal one.
    pub fn run_program(
        &mut self,
        script: &RobotScript,
        mut on_state: impl FnMut(&RobotState),
    ) -> Result<RobotState, LinkError> {
        self.send_program(script)?;
        loop {
            let st = self.next_state()?;
            on_state(&st);
            if st.is_terminal() {
                return Ok(st);
            }
        }
    }
}

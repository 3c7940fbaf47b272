//! Command line: batch runs, the HTTP service, a standalone simulator and
//! prompt digests for replay fixtures.
//!
//! Exit codes of `armtalk run`:
//!
//! | code | meaning |
//! |---|---|
//! | 0 | executed, robot reported done |
//! | 2 | scene file not found or unreadable |
//! | 3 | candidate failed validation; nothing executed |
//! | 4 | planning failed (targets not resolvable, model or fixture error) |
//! | 5 | robot halted before done (collision or protocol error) |
//! | 6 | robot link failed (simulator could not start, connection lost, program rejected) |
//! | 7 | plan not approved at the prompt |
//! | 8 | scene or fixture file is invalid |
//! | 9 | artifacts could not be written |
//! | 64 | bad command line |

use std::fs;
use std::io::{self, BufRead, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use armtalk_core::fixtures;
use armtalk_core::kinematics::KinematicChain;
use armtalk_core::llm::{build_prompt, PromptConfig, ReplayClient, ReplayFixture};
use armtalk_core::robot_link::{
    HaltReason, LinkError, RobotConnection, ScriptOptions, SimConfig, Simulator, DEFAULT_PORT,
    DEFAULT_SPEED_MPS,
};
use armtalk_core::scene::Scene;
use armtalk_core::session::{PlanContext, PlanMode, PlanSession, SessionEvent};
use clap::{Args, Parser, Subcommand};

pub mod exit {
    pub const DONE: u8 = 0;
    pub const SCENE_NOT_FOUND: u8 = 2;
    pub const VALIDATION_FAILED: u8 = 3;
    pub const PLAN_FAILED: u8 = 4;
    pub const HALTED: u8 = 5;
    pub const LINK_FAILED: u8 = 6;
    pub const NOT_APPROVED: u8 = 7;
    pub const INVALID_INPUT: u8 = 8;
    pub const IO: u8 = 9;
    pub const USAGE: u8 = 64;
}

pub const TRAJECTORY_FILE: &str = "trajectory.json";
pub const SCRIPT_FILE: &str = "program.script";
pub const STATE_LOG_FILE: &str = "states.log";

#[derive(Debug, Parser)]
#[command(
    name = "armtalk",
    version,
    about = "Plan, preview and execute robot waypoints from plain instructions"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Plan, approve and execute one instruction against a spawned simulator.
    Run(RunArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
    /// Run a standalone simulated controller.
    Sim(SimArgs),
    /// Print the prompt digest (and optionally the prompt) llm mode would send.
    Digest(DigestArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Scene document.
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub instruction: String,
    /// `reference` or `llm`.
    #[arg(long, default_value = "reference")]
    pub mode: PlanMode,
    /// Approve without asking.
    #[arg(long)]
    pub yes: bool,
    /// Write the trajectory document even when validation fails. Execution still requires a passing report.
    #[arg(long)]
    pub force: bool,
    /// Output directory for the trajectory document, script and state log.
    #[arg(long, default_value = "armtalk-out")]
    pub out: PathBuf,
    /// Simulator port; 0 picks a free one.
    #[arg(long, default_value_t = DEFAULT_PORT)]
    pub sim_port: u16,
    /// Physical scene for the simulator when it differs from the planning scene.
    #[arg(long)]
    pub sim_scene: Option<PathBuf>,
    /// Replay fixture answering llm-mode prompts.
    #[arg(long)]
    pub fixtures: Option<PathBuf>,
    /// Tool speed in m/s.
    #[arg(long, default_value_t = DEFAULT_SPEED_MPS)]
    pub speed: f64,
}

#[derive(Debug, Clone, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    /// Port of the in-process simulator; 0 picks a free one.
    #[arg(long, default_value_t = DEFAULT_PORT)]
    pub sim_port: u16,
    /// Use an external controller instead of the in-process simulator.
    #[arg(long)]
    pub robot: Option<SocketAddr>,
    /// Physical scene for the in-process simulator (defaults to the demo scene).
    #[arg(long)]
    pub sim_scene: Option<PathBuf>,
    /// Pace the simulator at its tick rate.
    #[arg(long)]
    pub real_time: bool,
    /// Replay fixture answering llm-mode prompts.
    #[arg(long)]
    pub fixtures: Option<PathBuf>,
    /// Session log directory.
    #[arg(long)]
    pub log_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SimArgs {
    #[arg(long, default_value_t = DEFAULT_PORT)]
    pub port: u16,
    /// Physical scene (defaults to the demo scene).
    #[arg(long)]
    pub scene: Option<PathBuf>,
    #[arg(long)]
    pub real_time: bool,
}

#[derive(Debug, Clone, Args)]
pub struct DigestArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub instruction: String,
    /// Also print the rendered prompt.
    #[arg(long)]
    pub show: bool,
}

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

type CliResult<T> = Result<T, Failure>;

pub fn load_scene_file(path: &Path) -> CliResult<Scene> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::new(exit::SCENE_NOT_FOUND, format!("{}: {e}", path.display())))?;
    let loaded = Scene::load(&text)
        .map_err(|e| Failure::new(exit::INVALID_INPUT, format!("{}: {e}", path.display())))?;
    for w in &loaded.warnings {
        eprintln!("warning: {}: {}: {}", path.display(), w.path, w.message);
    }
    Ok(loaded.scene)
}

fn load_fixture(path: Option<&Path>) -> CliResult<Option<ReplayFixture>> {
    path.map(|p| {
        ReplayFixture::load(p).map_err(|e| Failure::new(exit::INVALID_INPUT, e.to_string()))
    })
    .transpose()
}

fn chain_for(scene: &Scene) -> KinematicChain {
    fixtures::demo_chain().with_base_pose(scene.base_pose)
}

fn ask_approval(input: &mut dyn BufRead, err: &mut dyn Write) -> bool {
    let _ = write!(err, "Approve and execute? [y/N] ");
    let _ = err.flush();
    let mut line = String::new();
    if input.read_line(&mut line).is_err() {
        return false;
    }
    matches!(line.trim().to_ascii_lowercase().as_str(), "y" | "yes")
}

fn write_artifact(dir: &Path, name: &str, text: &str) -> CliResult<()> {
    fs::create_dir_all(dir)
        .and_then(|_| fs::write(dir.join(name), text))
        .map_err(|e| Failure::new(exit::IO, format!("{}: {e}", dir.join(name).display())))
}

/// Batch run. Reports progress on `out`/`err`; `input` answers the approval prompt.
pub fn run(
    args: &RunArgs,
    input: &mut dyn BufRead,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> CliResult<()> {
    let scene = load_scene_file(&args.scene)?;
    let sim_scene = match &args.sim_scene {
        Some(p) => load_scene_file(p)?,
        None => scene.clone(),
    };
    let fixture = load_fixture(args.fixtures.as_deref())?;
    if args.mode == PlanMode::Llm && fixture.is_none() {
        return Err(Failure::new(exit::USAGE, "--mode llm needs --fixtures"));
    }
    let chain = chain_for(&scene);

    let mut session = PlanSession::create(args.scene.display().to_string(), &args.instruction)
        .map_err(|e| Failure::new(exit::USAGE, e.to_string()))?;
    let mut client = fixture.as_ref().map(ReplayClient::new);
    let mut ctx = PlanContext::new(&scene, &chain);
    if let Some(c) = client.as_mut() {
        ctx = ctx.with_llm(c);
    }
    session
        .plan(args.mode, &mut ctx)
        .map_err(|e| Failure::new(exit::PLAN_FAILED, e.to_string()))?;
    for entry in session.history() {
        if let SessionEvent::LlmFallback { reason } = &entry.event {
            let _ = writeln!(err, "note: falling back to the reference planner: {reason}");
        }
    }

    let candidate = session.candidate().expect("planned").clone();
    let report = session.report().expect("planned").clone();
    for (wp, check) in candidate.waypoints().iter().zip(&report.waypoints) {
        let _ = writeln!(
            out,
            "{} {} {}",
            wp.name,
            wp.position,
            if check.is_clean() { "ok" } else { "FAIL" }
        );
    }
    if !report.overall {
        for p in report.problems() {
            let _ = writeln!(err, "validation: {p}");
        }
        if args.force {
            write_artifact(&args.out, TRAJECTORY_FILE, &candidate.to_json())?;
        }
        return Err(Failure::new(
            exit::VALIDATION_FAILED,
            "candidate failed validation; not executing",
        ));
    }

    if !args.yes && !ask_approval(input, err) {
        return Err(Failure::new(exit::NOT_APPROVED, "plan not approved"));
    }
    session
        .approve()
        .map_err(|e| Failure::new(exit::VALIDATION_FAILED, e.to_string()))?;
    write_artifact(&args.out, TRAJECTORY_FILE, &candidate.to_json())?;

    let sim = Simulator::new(chain.clone(), sim_scene, SimConfig::default());
    let server = sim
        .serve(("127.0.0.1", args.sim_port))
        .map_err(|e| Failure::new(exit::LINK_FAILED, format!("simulator: {e}")))?;
    let mut conn = RobotConnection::connect(server.addr())
        .map_err(|e| Failure::new(exit::LINK_FAILED, e.to_string()))?;
    let opts = ScriptOptions {
        speed: args.speed,
        ..ScriptOptions::default()
    };
    let script = session
        .begin_execution(&scene, &opts)
        .map_err(|e| Failure::new(exit::INVALID_INPUT, e.to_string()))?;
    write_artifact(&args.out, SCRIPT_FILE, &script.text)?;

    let mut log = String::new();
    let outcome = conn.run_program(&script, |st| {
        log.push_str(&st.to_line());
        log.push('\n');
    });
    let link_error = outcome.as_ref().err().cloned();
    let _ = session.finish_execution(outcome.clone());
    write_artifact(&args.out, STATE_LOG_FILE, &log)?;
    server.shutdown();

    if let Some(e) = link_error {
        return Err(match e {
            LinkError::Nack { .. } | LinkError::Transport(_) | LinkError::Protocol(_) => {
                Failure::new(exit::LINK_FAILED, e.to_string())
            }
            other => Failure::new(exit::INVALID_INPUT, other.to_string()),
        });
    }
    let last = outcome.expect("checked above");
    let _ = writeln!(out, "final {} {}", last.end_effector, session.status());
    match last.halted_reason {
        Some(HaltReason::Done) => Ok(()),
        Some(reason) => Err(Failure::new(
            exit::HALTED,
            format!(
                "robot halted: {reason:?} at t={} s, tool at {}",
                last.t, last.end_effector
            ),
        )),
        None => Err(Failure::new(
            exit::LINK_FAILED,
            "stream ended without a terminal state",
        )),
    }
}

pub fn digest(args: &DigestArgs, out: &mut dyn Write) -> CliResult<()> {
    let scene = load_scene_file(&args.scene)?;
    let bundle = build_prompt(&scene, &args.instruction, &PromptConfig::default())
        .map_err(|e| Failure::new(exit::USAGE, e.to_string()))?;
    let _ = writeln!(out, "{}", bundle.digest());
    for d in &bundle.diagnostics {
        eprintln!("note: {d}");
    }
    if args.show {
        let _ = write!(out, "{}", bundle.render());
    }
    Ok(())
}

fn physical_scene(path: Option<&Path>) -> CliResult<Scene> {
    match path {
        Some(p) => load_scene_file(p),
        None => Ok(fixtures::demo_scene()),
    }
}

pub fn sim(args: &SimArgs) -> CliResult<()> {
    let scene = physical_scene(args.scene.as_deref())?;
    let sim = Simulator::new(
        chain_for(&scene),
        scene,
        SimConfig {
            real_time: args.real_time,
            ..SimConfig::default()
        },
    );
    let server = sim
        .serve(("127.0.0.1", args.port))
        .map_err(|e| Failure::new(exit::LINK_FAILED, e.to_string()))?;
    eprintln!("simulator listening on {}", server.addr());
    loop {
        std::thread::park();
    }
}

pub fn serve(args: &ServeArgs) -> CliResult<()> {
    let fixture = load_fixture(args.fixtures.as_deref())?;
    let scene = physical_scene(args.sim_scene.as_deref())?;
    let chain = chain_for(&scene);
    let mut _sim_server = None;
    let robot_addr = match args.robot {
        Some(a) => a,
        None => {
            let sim = Simulator::new(
                chain.clone(),
                scene,
                SimConfig {
                    real_time: args.real_time,
                    ..SimConfig::default()
                },
            );
            let server = sim
                .serve(("127.0.0.1", args.sim_port))
                .map_err(|e| Failure::new(exit::LINK_FAILED, format!("simulator: {e}")))?;
            let addr = server.addr();
            _sim_server = Some(server);
            addr
        }
    };
    let state = crate::api::AppState::new(crate::api::ServiceConfig {
        chain,
        robot_addr,
        replay: fixture,
        log_dir: args.log_dir.clone(),
        script: ScriptOptions::default(),
    })
    .map_err(|e| Failure::new(exit::INVALID_INPUT, e))?;
    let rt = tokio::runtime::Runtime::new().map_err(|e| Failure::new(exit::IO, e.to_string()))?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(args.addr)
            .await
            .map_err(|e| Failure::new(exit::IO, format!("{}: {e}", args.addr)))?;
        eprintln!("listening on http://{} (robot at {robot_addr})", args.addr);
        crate::api::serve(listener, state)
            .await
            .map_err(|e| Failure::new(exit::IO, e.to_string()))
    })
}

/// Parses `argv` and runs the command; returns the process exit code.
pub fn main_with(argv: impl IntoIterator<Item = String>) -> u8 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() {
                exit::USAGE
            } else {
                exit::DONE
            };
            let _ = e.print();
            return code;
        }
    };
    let stdin = io::stdin();
    let result = match &cli.command {
        Command::Run(a) => run(a, &mut stdin.lock(), &mut io::stdout(), &mut io::stderr()),
        Command::Serve(a) => serve(a),
        Command::Sim(a) => sim(a),
        Command::Digest(a) => digest(a, &mut io::stdout()),
    };
    match result {
        Ok(()) => exit::DONE,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

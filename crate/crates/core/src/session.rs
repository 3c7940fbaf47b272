//! Human-in-the-loop planning sessions.
//!
//! A session moves `drafting -> awaiting-approval -> approved -> executing
//! -> done | failed`. Edits and re-plans keep it in `awaiting-approval`;
//! nothing reaches the robot without an approval of a passing report.
//! Every accepted operation appends to the history; rejected operations
//! leave the session untouched.

use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::KinematicChain;
use crate::llm::{
    build_prompt, request_waypoints, resolve_targets, ChatClient, LlmError, ModelConfig,
    PromptConfig, TargetResolutionError,
};
use crate::planner::{
    apply_edit, generate_arc_waypoints, validate, ArcParams, PlanError, Trajectory,
    TrajectoryError, ValidationReport,
};
use crate::robot_link::{
    emit_script, HaltReason, LinkError, RobotConnection, RobotScript, RobotState, ScriptOptions,
    Simulator,
};
use crate::scene::{Scene, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SessionStatus {
    Drafting,
    AwaitingApproval,
    Approved,
    Executing,
    Done,
    Failed,
}

impl SessionStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            SessionStatus::Drafting => "drafting",
            SessionStatus::AwaitingApproval => "awaiting-approval",
            SessionStatus::Approved => "approved",
            SessionStatus::Executing => "executing",
            SessionStatus::Done => "done",
            SessionStatus::Failed => "failed",
        }
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, SessionStatus::Done | SessionStatus::Failed)
    }
}

impl fmt::Display for SessionStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlanMode {
    Llm,
    Reference,
}

impl std::str::FromStr for PlanMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "llm" => Ok(PlanMode::Llm),
            "reference" => Ok(PlanMode::Reference),
            _ => Err(format!("unknown mode `{s}` (expected llm or reference)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SessionEvent {
    Created {
        scene_id: String,
        instruction: String,
    },
    /// The model reply could not be used; the reference planner took over.
    LlmFallback {
        reason: String,
    },
    Planned {
        mode: PlanMode,
        candidate: Trajectory,
        report: ValidationReport,
    },
    PlanFailed {
        error: String,
    },
    Edited {
        index: usize,
        position: Vec3,
        candidate: Trajectory,
        report: ValidationReport,
    },
    Approved,
    ExecutionStarted {
        script: String,
    },
    ExecutionFinished {
        reason: HaltReason,
        final_state: RobotState,
    },
    ExecutionFailed {
        error: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub seq: usize,
    /// Milliseconds since the Unix epoch.
    pub timestamp_ms: u64,
    /// Status after the event.
    pub status: SessionStatus,
    pub event: SessionEvent,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SessionError {
    #[error("instruction is empty")]
    EmptyInstruction,
    #[error("cannot {op} while {status}")]
    WrongState {
        op: &'static str,
        status: SessionStatus,
    },
    #[error("candidate does not pass validation: {}", .0.join("; "))]
    ValidationFailed(Vec<String>),
    #[error("waypoint index {index} out of range for {len} waypoints")]
    IndexOutOfRange { index: usize, len: usize },
    #[error(transparent)]
    TargetResolution(#[from] TargetResolutionError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Trajectory(TrajectoryError),
    #[error(transparent)]
    Link(#[from] LinkError),
    #[error("llm mode needs a chat client")]
    NoChatClient,
    #[error("session log: {0}")]
    Log(String),
}

impl From<TrajectoryError> for SessionError {
    fn from(e: TrajectoryError) -> Self {
        match e {
            TrajectoryError::IndexOutOfRange { index, len } => {
                SessionError::IndexOutOfRange { index, len }
            }
            other => SessionError::Trajectory(other),
        }
    }
}

/// Runs a program on a robot and relays its states until the terminal one.
pub trait RobotPort {
    fn run(
        &mut self,
        script: &RobotScript,
        on_state: &mut dyn FnMut(&RobotState),
    ) -> Result<RobotState, LinkError>;
}

impl RobotPort for RobotConnection {
    fn run(
        &mut self,
        script: &RobotScript,
        on_state: &mut dyn FnMut(&RobotState),
    ) -> Result<RobotState, LinkError> {
        self.run_program(script, on_state)
    }
}

impl RobotPort for Simulator {
    fn run(
        &mut self,
        script: &RobotScript,
        on_state: &mut dyn FnMut(&RobotState),
    ) -> Result<RobotState, LinkError> {
        Simulator::run(self, &script.move_commands, on_state).ok_or(LinkError::Nack {
            line: 0,
            reason: "busy".into(),
        })
    }
}

/// Planning inputs that live outside the session.
pub struct PlanContext<'a> {
    pub scene: &'a Scene,
    pub chain: &'a KinematicChain,
    pub llm: Option<&'a mut dyn ChatClient>,
    pub model: ModelConfig,
    pub prompt: PromptConfig,
}

impl<'a> PlanContext<'a> {
    pub fn new(scene: &'a Scene, chain: &'a KinematicChain) -> Self {
        Self {
            scene,
            chain,
            llm: None,
            model: ModelConfig::default(),
            prompt: PromptConfig::default(),
        }
    }

    pub fn with_llm(mut self, client: &'a mut dyn ChatClient) -> Self {
        self.llm = Some(client);
        self
    }
}

/// Reference plan: resolve the two target surfaces, then arc between their tops.
pub fn plan_reference(scene: &Scene, instruction: &str) -> Result<Trajectory, SessionError> {
    let targets = resolve_targets(scene, instruction)?;
    let top = |name: &str| {
        scene
            .object(name)
            .expect("resolved from scene")
            .top_center()
    };
    Ok(generate_arc_waypoints(
        scene,
        top(&targets.start),
        top(&targets.end),
        ArcParams::default(),
    )?)
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

/// Fields are read-only from outside so the state machine cannot be bypassed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanSession {
    id: String,
    scene_id: String,
    instruction: String,
    candidate: Option<Trajectory>,
    report: Option<ValidationReport>,
    status: SessionStatus,
    history: Vec<HistoryEntry>,
}

impl PlanSession {
    pub fn create(scene_id: impl Into<String>, instruction: &str) -> Result<Self, SessionError> {
        Self::create_with_id(uuid::Uuid::new_v4().to_string(), scene_id, instruction)
    }

    pub fn create_with_id(
        id: impl Into<String>,
        scene_id: impl Into<String>,
        instruction: &str,
    ) -> Result<Self, SessionError> {
        let instruction = instruction.trim();
        if instruction.is_empty() {
            return Err(SessionError::EmptyInstruction);
        }
        let mut s = Self {
            id: id.into(),
            scene_id: scene_id.into(),
            instruction: instruction.to_string(),
            candidate: None,
            report: None,
            status: SessionStatus::Drafting,
            history: Vec::new(),
        };
        let event = SessionEvent::Created {
            scene_id: s.scene_id.clone(),
            instruction: s.instruction.clone(),
        };
        s.record(event);
        Ok(s)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn scene_id(&self) -> &str {
        &self.scene_id
    }

    pub fn instruction(&self) -> &str {
        &self.instruction
    }

    pub fn candidate(&self) -> Option<&Trajectory> {
        self.candidate.as_ref()
    }

    pub fn report(&self) -> Option<&ValidationReport> {
        self.report.as_ref()
    }

    pub fn status(&self) -> SessionStatus {
        self.status
    }

    pub fn history(&self) -> &[HistoryEntry] {
        &self.history
    }

    fn record(&mut self, event: SessionEvent) {
        self.apply(&event);
        self.history.push(HistoryEntry {
            seq: self.history.len(),
            timestamp_ms: now_ms(),
            status: self.status,
            event,
        });
    }

    /// State change for one event; shared by live operations and log replay.
    fn apply(&mut self, event: &SessionEvent) {
        match event {
            SessionEvent::Created {
                scene_id,
                instruction,
            } => {
                self.scene_id = scene_id.clone();
                self.instruction = instruction.clone();
                self.status = SessionStatus::Drafting;
            }
            SessionEvent::LlmFallback { .. } => {}
            SessionEvent::Planned {
                candidate, report, ..
            }
            | SessionEvent::Edited {
                candidate, report, ..
            } => {
                self.candidate = Some(candidate.clone());
                self.report = Some(report.clone());
                self.status = SessionStatus::AwaitingApproval;
            }
            SessionEvent::PlanFailed { .. } | SessionEvent::ExecutionFailed { .. } => {
                self.status = SessionStatus::Failed;
            }
            SessionEvent::Approved => self.status = SessionStatus::Approved,
            SessionEvent::ExecutionStarted { .. } => self.status = SessionStatus::Executing,
            SessionEvent::ExecutionFinished { reason, .. } => {
                self.status = if *reason == HaltReason::Done {
                    SessionStatus::Done
                } else {
                    SessionStatus::Failed
                };
            }
        }
    }

    /// Rebuilds a session from its persisted history.
    pub fn from_history(
        id: impl Into<String>,
        history: Vec<HistoryEntry>,
    ) -> Result<Self, SessionError> {
        let mut s = Self {
            id: id.into(),
            scene_id: String::new(),
            instruction: String::new(),
            candidate: None,
            report: None,
            status: SessionStatus::Drafting,
            history: Vec::with_capacity(history.len()),
        };
        match history.first().map(|e| &e.event) {
            Some(SessionEvent::Created { .. }) => {}
            _ => {
                return Err(SessionError::Log(
                    "history must start with a created event".into(),
                ))
            }
        }
        for (i, entry) in history.into_iter().enumerate() {
            if entry.seq != i {
                return Err(SessionError::Log(format!(
                    "entry {i} has sequence number {}",
                    entry.seq
                )));
            }
            s.apply(&entry.event);
            if s.status != entry.status {
                return Err(SessionError::Log(format!(
                    "entry {i} records status {} but replay gives {}",
                    entry.status, s.status
                )));
            }
            s.history.push(entry);
        }
        Ok(s)
    }

    fn require(&self, op: &'static str, allowed: &[SessionStatus]) -> Result<(), SessionError> {
        if allowed.contains(&self.status) {
            Ok(())
        } else {
            Err(SessionError::WrongState {
                op,
                status: self.status,
            })
        }
    }

    /// Produces and validates a candidate. Allowed from drafting, and from
    /// awaiting-approval to re-plan. Planning errors fail the session.
    pub fn plan(&mut self, mode: PlanMode, ctx: &mut PlanContext<'_>) -> Result<(), SessionError> {
        self.require(
            "plan",
            &[SessionStatus::Drafting, SessionStatus::AwaitingApproval],
        )?;
        match self.make_candidate(mode, ctx) {
            Ok(candidate) => {
                let report = validate(ctx.scene, ctx.chain, &candidate);
                self.record(SessionEvent::Planned {
                    mode,
                    candidate,
                    report,
                });
                Ok(())
            }
            Err(e) => {
                self.record(SessionEvent::PlanFailed {
                    error: e.to_string(),
                });
                Err(e)
            }
        }
    }

    fn make_candidate(
        &mut self,
        mode: PlanMode,
        ctx: &mut PlanContext<'_>,
    ) -> Result<Trajectory, SessionError> {
        if mode == PlanMode::Reference {
            return plan_reference(ctx.scene, &self.instruction);
        }
        let client = ctx.llm.as_deref_mut().ok_or(SessionError::NoChatClient)?;
        let bundle = build_prompt(ctx.scene, &self.instruction, &ctx.prompt)?;
        match request_waypoints(client, &bundle, &ctx.model) {
            Ok(reply) => {
                let mut traj = reply.parsed.expect("successful reply carries a trajectory");
                if let Some(t) = &bundle.targets {
                    let top = |name: &str| ctx.scene.object(name).expect("resolved").top_center();
                    traj.start_target = top(&t.start);
                    traj.end_target = top(&t.end);
                }
                Ok(traj)
            }
            Err(e @ LlmError::ParseFailure { .. }) => {
                self.record(SessionEvent::LlmFallback {
                    reason: e.to_string(),
                });
                plan_reference(ctx.scene, &self.instruction)
            }
            Err(e) => Err(e.into()),
        }
    }

    /// Moves one waypoint and re-validates.
    pub fn edit_waypoint(
        &mut self,
        index: usize,
        position: Vec3,
        scene: &Scene,
        chain: &KinematicChain,
    ) -> Result<(), SessionError> {
        self.require("edit", &[SessionStatus::AwaitingApproval])?;
        let current = self
            .candidate
            .as_ref()
            .expect("awaiting approval has a candidate");
        let candidate = apply_edit(current, index, position)?;
        let report = validate(scene, chain, &candidate);
        self.record(SessionEvent::Edited {
            index,
            position,
            candidate,
            report,
        });
        Ok(())
    }

    pub fn approve(&mut self) -> Result<(), SessionError> {
        self.require("approve", &[SessionStatus::AwaitingApproval])?;
        let report = self
            .report
            .as_ref()
            .expect("awaiting approval has a report");
        if !report.overall {
            return Err(SessionError::ValidationFailed(report.problems()));
        }
        self.record(SessionEvent::Approved);
        Ok(())
    }

    /// Approved -> executing. Returns the program to send.
    pub fn begin_execution(
        &mut self,
        scene: &Scene,
        opts: &ScriptOptions,
    ) -> Result<RobotScript, SessionError> {
        self.require("execute", &[SessionStatus::Approved])?;
        let (Some(candidate), Some(report)) = (&self.candidate, &self.report) else {
            unreachable!("approved sessions have a candidate and report");
        };
        let script = emit_script(candidate, report, &scene.base_pose, opts)?;
        self.record(SessionEvent::ExecutionStarted {
            script: script.text.clone(),
        });
        Ok(script)
    }

    /// Executing -> done | failed, from the robot's terminal state or error.
    pub fn finish_execution(
        &mut self,
        outcome: Result<RobotState, LinkError>,
    ) -> Result<(), SessionError> {
        self.require("finish execution", &[SessionStatus::Executing])?;
        match outcome {
            Ok(final_state) => {
                let reason = final_state
                    .halted_reason
                    .unwrap_or(HaltReason::ProtocolError);
                self.record(SessionEvent::ExecutionFinished {
                    reason,
                    final_state,
                });
                Ok(())
            }
            Err(e) => {
                self.record(SessionEvent::ExecutionFailed {
                    error: e.to_string(),
                });
                Err(e.into())
            }
        }
    }

    /// Sends the approved candidate to the robot and waits for the outcome.
    pub fn execute(
        &mut self,
        robot: &mut dyn RobotPort,
        scene: &Scene,
        opts: &ScriptOptions,
        on_state: &mut dyn FnMut(&RobotState),
    ) -> Result<(), SessionError> {
        let script = self.begin_execution(scene, opts)?;
        let outcome = robot.run(&script, on_state);
        self.finish_execution(outcome)
    }
}

/// Append-only JSON-lines logs, one file per session.
#[derive(Debug, Clone)]
pub struct SessionLog {
    dir: PathBuf,
}

impl SessionLog {
    pub fn open(dir: impl Into<PathBuf>) -> io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.jsonl"))
    }

    /// Appends the entries the log has not seen yet.
    pub fn sync(&self, session: &PlanSession) -> Result<(), SessionError> {
        let path = self.path(session.id());
        let written = match fs::File::open(&path) {
            Ok(f) => io::BufReader::new(f).lines().count(),
            Err(e) if e.kind() == io::ErrorKind::NotFound => 0,
            Err(e) => return Err(SessionError::Log(e.to_string())),
        };
        let fresh = session.history().get(written..).unwrap_or_default();
        if fresh.is_empty() {
            return Ok(());
        }
        let mut text = String::new();
        for entry in fresh {
            text.push_str(&serde_json::to_string(entry).expect("history serializes"));
            text.push('\n');
        }
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| SessionError::Log(e.to_string()))?;
        file.write_all(text.as_bytes())
            .map_err(|e| SessionError::Log(e.to_string()))
    }

    pub fn load(&self, id: &str) -> Result<PlanSession, SessionError> {
        let text =
            fs::read_to_string(self.path(id)).map_err(|e| SessionError::Log(e.to_string()))?;
        let history = text
            .lines()
            .map(serde_json::from_str)
            .collect::<Result<Vec<HistoryEntry>, _>>()
            .map_err(|e| SessionError::Log(e.to_string()))?;
        PlanSession::from_history(id, history)
    }

    /// Ids of every logged session, sorted.
    pub fn ids(&self) -> io::Result<Vec<String>> {
        let mut ids: Vec<String> = fs::read_dir(&self.dir)?
            .filter_map(Result::ok)
            .filter_map(|e| {
                let name = e.file_name().into_string().ok()?;
                name.strip_suffix(".jsonl").map(str::to_string)
            })
            .collect();
        ids.sort();
        Ok(ids)
    }
}

/// Prompt digest a session would send in llm mode, for authoring replay fixtures.
pub fn llm_prompt_digest(scene: &Scene, instruction: &str) -> Result<String, LlmError> {
    Ok(build_prompt(scene, instruction, &PromptConfig::default())?.digest())
}

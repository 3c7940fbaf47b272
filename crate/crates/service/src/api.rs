//! HTTP API over the session engine.
//!
//! Routes:
//!
//! | method | path | body | reply |
//! |---|---|---|---|
//! | POST | `/scenes` | scene document | `{scene_id, warnings}` |
//! | GET | `/scenes/{id}` | | scene document |
//! | GET | `/chain` | | `{joints, base_pose}` |
//! | POST | `/sessions` | `{scene_id, instruction, mode}` | session (drafting; planning runs in the background) |
//! | GET | `/sessions` | | `[{id, status, instruction}]` |
//! | GET | `/sessions/{id}` | | session |
//! | POST | `/sessions/{id}/plan` | `{mode}` | session (re-plan) |
//! | PATCH | `/sessions/{id}/waypoints/{index}` | `{position: [x, y, z]}` | session |
//! | POST | `/sessions/{id}/approve` | | session |
//! | POST | `/sessions/{id}/execute` | | session (executing; the robot runs in the background) |
//! | GET | `/sessions/{id}/stream` | | server-sent events |
//! | GET | `/animations` | | clip names |
//! | GET | `/animations/{name}` | | clip |
//! | POST | `/animations/prompt` | `{instruction}` | `{prompt, digest, temperature}` |
//!
//! A session's `candidate` is the trajectory document. The stream opens
//! with a `session` event holding the full session, then sends a `history`
//! event per new history entry and a `state` event per robot state. It
//! closes after the session reaches `done` or `failed`.

use std::collections::HashMap;
use std::convert::Infallible;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use armtalk_core::animation::{
    build_animation_prompt, frames_to_clip, parse_frame_format, parse_track_format, AnimationClip,
    RigDescription, DEFAULT_FRAME_INTERVAL_S,
};
use armtalk_core::fixtures;
use armtalk_core::kinematics::KinematicChain;
use armtalk_core::llm::{ReplayClient, ReplayFixture};
use armtalk_core::robot_link::{LinkError, RobotConnection, RobotState, ScriptOptions};
use armtalk_core::scene::{Scene, Vec3};
use armtalk_core::session::{
    HistoryEntry, PlanContext, PlanMode, PlanSession, SessionError, SessionLog,
};
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, patch, post};
use axum::{Json, Router};
use futures::stream::{self, Stream, StreamExt};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::broadcast;

const STREAM_CAPACITY: usize = 4096;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub chain: KinematicChain,
    /// Controller the service executes on.
    pub robot_addr: SocketAddr,
    /// Canned model replies for llm mode; llm mode is refused without it.
    pub replay: Option<ReplayFixture>,
    /// Directory for session logs and uploaded scenes.
    pub log_dir: Option<PathBuf>,
    pub script: ScriptOptions,
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "type", content = "data", rename_all = "kebab-case")]
pub enum StreamEvent {
    History(HistoryEntry),
    State(RobotState),
}

struct SessionSlot {
    session: Mutex<PlanSession>,
    events: broadcast::Sender<StreamEvent>,
}

impl SessionSlot {
    fn new(session: PlanSession) -> Arc<Self> {
        let (events, _) = broadcast::channel(STREAM_CAPACITY);
        Arc::new(Self {
            session: Mutex::new(session),
            events,
        })
    }
}

struct Inner {
    config: ServiceConfig,
    scenes: RwLock<HashMap<String, Arc<Scene>>>,
    sessions: RwLock<HashMap<String, Arc<SessionSlot>>>,
    /// The one arm; holding the lock is holding the arm.
    robot: tokio::sync::Mutex<Option<RobotConnection>>,
    log: Option<SessionLog>,
}

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    /// Builds the state, reloading scenes and sessions from the log directory.
    pub fn new(config: ServiceConfig) -> Result<Self, String> {
        let log = match &config.log_dir {
            Some(dir) => Some(SessionLog::open(dir).map_err(|e| e.to_string())?),
            None => None,
        };
        let mut scenes = HashMap::new();
        let mut sessions = HashMap::new();
        if let Some(log) = &log {
            let scene_dir = log.dir().join("scenes");
            if let Ok(entries) = std::fs::read_dir(&scene_dir) {
                for entry in entries.flatten() {
                    let path = entry.path();
                    let Some(id) = path.file_stem().and_then(|s| s.to_str()) else {
                        continue;
                    };
                    let text = std::fs::read_to_string(&path).map_err(|e| e.to_string())?;
                    let loaded =
                        Scene::load(&text).map_err(|e| format!("{}: {e}", path.display()))?;
                    scenes.insert(id.to_string(), Arc::new(loaded.scene));
                }
            }
            for id in log.ids().map_err(|e| e.to_string())? {
                let session = log.load(&id).map_err(|e| e.to_string())?;
                sessions.insert(id, SessionSlot::new(session));
            }
        }
        Ok(Self(Arc::new(Inner {
            config,
            scenes: RwLock::new(scenes),
            sessions: RwLock::new(sessions),
            robot: tokio::sync::Mutex::new(None),
            log,
        })))
    }

    fn scene(&self, id: &str) -> Result<Arc<Scene>, ApiError> {
        self.0
            .scenes
            .read()
            .expect("scene lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("no scene `{id}`")))
    }

    fn slot(&self, id: &str) -> Result<Arc<SessionSlot>, ApiError> {
        self.0
            .sessions
            .read()
            .expect("session lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("no session `{id}`")))
    }

    /// Runs `op` on the session, then persists and broadcasts any new
    /// history. Mutations of one session are serialized by its lock.
    fn mutate<T>(
        &self,
        slot: &SessionSlot,
        op: impl FnOnce(&mut PlanSession) -> Result<T, SessionError>,
    ) -> (Result<T, SessionError>, PlanSession) {
        let mut session = slot.session.lock().expect("session lock");
        let before = session.history().len();
        let result = op(&mut session);
        if session.history().len() > before {
            if let Some(log) = &self.0.log {
                if let Err(e) = log.sync(&session) {
                    eprintln!("session log: {e}");
                }
            }
            for entry in &session.history()[before..] {
                let _ = slot.events.send(StreamEvent::History(entry.clone()));
            }
        }
        (result, session.clone())
    }

    fn plan(
        &self,
        slot: &SessionSlot,
        scene: &Scene,
        mode: PlanMode,
    ) -> (Result<(), SessionError>, PlanSession) {
        let chain = &self.0.config.chain;
        self.mutate(slot, |s| {
            let mut ctx = PlanContext::new(scene, chain);
            let mut client = self.0.config.replay.as_ref().map(ReplayClient::new);
            if let Some(c) = client.as_mut() {
                ctx = ctx.with_llm(c);
            }
            s.plan(mode, &mut ctx)
        })
    }

    fn require_mode(&self, mode: PlanMode) -> Result<(), ApiError> {
        if mode == PlanMode::Llm && self.0.config.replay.is_none() {
            return Err(ApiError::bad_request(
                "llm mode is not available: the service has no replay fixture",
            ));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        let status = match &e {
            SessionError::EmptyInstruction
            | SessionError::IndexOutOfRange { .. }
            | SessionError::Trajectory(_)
            | SessionError::NoChatClient => StatusCode::BAD_REQUEST,
            SessionError::WrongState { .. } => StatusCode::CONFLICT,
            SessionError::ValidationFailed(_)
            | SessionError::TargetResolution(_)
            | SessionError::Plan(_) => StatusCode::UNPROCESSABLE_ENTITY,
            SessionError::Llm(_) | SessionError::Link(_) => StatusCode::BAD_GATEWAY,
            SessionError::Log(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn session_json(s: &PlanSession) -> Json<Value> {
    Json(serde_json::to_value(s).expect("session serializes"))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> T {
    tokio::task::spawn_blocking(f)
        .await
        .expect("worker panicked")
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/scenes", post(upload_scene))
        .route("/scenes/{id}", get(get_scene))
        .route("/chain", get(get_chain))
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/plan", post(replan))
        .route("/sessions/{id}/waypoints/{index}", patch(edit_waypoint))
        .route("/sessions/{id}/approve", post(approve))
        .route("/sessions/{id}/execute", post(execute))
        .route("/sessions/{id}/stream", get(stream_session))
        .route("/animations", get(list_animations))
        .route("/animations/prompt", post(animation_prompt))
        .route("/animations/{name}", get(get_animation))
        .with_state(state)
}

async fn upload_scene(
    State(app): State<AppState>,
    body: String,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let loaded = Scene::load(&body).map_err(|e| ApiError::bad_request(e.to_string()))?;
    let id = uuid::Uuid::new_v4().to_string();
    if let Some(log) = &app.0.log {
        let dir = log.dir().join("scenes");
        std::fs::create_dir_all(&dir)
            .and_then(|_| std::fs::write(dir.join(format!("{id}.json")), loaded.scene.to_json()))
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    }
    let warnings: Vec<Value> = loaded
        .warnings
        .iter()
        .map(|w| json!({ "path": w.path, "message": w.message }))
        .collect();
    app.0
        .scenes
        .write()
        .expect("scene lock")
        .insert(id.clone(), Arc::new(loaded.scene));
    Ok((
        StatusCode::CREATED,
        Json(json!({ "scene_id": id, "warnings": warnings })),
    ))
}

async fn get_scene(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let scene = app.scene(&id)?;
    Ok(Json(
        serde_json::from_str(&scene.to_json()).expect("scene json"),
    ))
}

async fn get_chain(State(app): State<AppState>) -> Json<Value> {
    let chain = &app.0.config.chain;
    Json(json!({ "joints": chain.joints(), "base_pose": chain.base_pose }))
}

#[derive(Debug, Deserialize)]
pub struct CreateSession {
    pub scene_id: String,
    pub instruction: String,
    #[serde(default = "default_mode")]
    pub mode: PlanMode,
}

fn default_mode() -> PlanMode {
    PlanMode::Reference
}

async fn create_session(
    State(app): State<AppState>,
    Json(req): Json<CreateSession>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let scene = app.scene(&req.scene_id)?;
    app.require_mode(req.mode)?;
    let session = PlanSession::create(&req.scene_id, &req.instruction)?;
    let snapshot = session.clone();
    let id = session.id().to_string();
    let slot = SessionSlot::new(session);
    if let Some(log) = &app.0.log {
        log.sync(&snapshot).map_err(ApiError::from)?;
    }
    app.0
        .sessions
        .write()
        .expect("session lock")
        .insert(id, Arc::clone(&slot));
    let mode = req.mode;
    tokio::task::spawn_blocking(move || {
        let _ = app.plan(&slot, &scene, mode);
    });
    Ok((StatusCode::CREATED, session_json(&snapshot)))
}

async fn list_sessions(State(app): State<AppState>) -> Json<Value> {
    let sessions = app.0.sessions.read().expect("session lock");
    let mut rows: Vec<Value> = sessions
        .values()
        .map(|slot| {
            let s = slot.session.lock().expect("session lock");
            json!({ "id": s.id(), "status": s.status(), "instruction": s.instruction() })
        })
        .collect();
    rows.sort_by(|a, b| a["id"].as_str().cmp(&b["id"].as_str()));
    Json(Value::Array(rows))
}

async fn get_session(
    State(app): State<AppState>,
    Path(id): Path<String>,
) -> ApiResult<Json<Value>> {
    let slot = app.slot(&id)?;
    let session = slot.session.lock().expect("session lock");
    Ok(session_json(&session))
}

#[derive(Debug, Deserialize)]
pub struct Replan {
    #[serde(default = "default_mode")]
    pub mode: PlanMode,
}

async fn replan(
    State(app): State<AppState>,
    Path(id): Path<String>,
    Json(req): Json<Replan>,
) -> ApiResult<Json<Value>> {
    let slot = app.slot(&id)?;
    app.require_mode(req.mode)?;
    let scene_id = slot
        .session
        .lock()
        .expect("session lock")
        .scene_id()
        .to_string();
    let scene = app.scene(&scene_id)?;
    let (result, session) = blocking(move || app.plan(&slot, &scene, req.mode)).await;
    result?;
    Ok(session_json(&session))
}

#[derive(Debug, Deserialize)]
pub struct EditWaypoint {
    pub position: Vec3,
}

async fn edit_waypoint(
    State(app): State<AppState>,
    Path((id, index)): Path<(String, usize)>,
    Json(req): Json<EditWaypoint>,
) -> ApiResult<Json<Value>> {
    let slot = app.slot(&id)?;
    let scene_id = slot
        .session
        .lock()
        .expect("session lock")
        .scene_id()
        .to_string();
    let scene = app.scene(&scene_id)?;
    let (result, session) = blocking(move || {
        let chain = app.0.config.chain.clone();
        app.mutate(&slot, |s| {
            s.edit_waypoint(index, req.position, &scene, &chain)
        })
    })
    .await;
    result?;
    Ok(session_json(&session))
}

async fn approve(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let slot = app.slot(&id)?;
    let (result, session) = app.mutate(&slot, PlanSession::approve);
    result?;
    Ok(session_json(&session))
}

async fn execute(
    State(app): State<AppState>,
    Path(id): Path<String>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let slot = app.slot(&id)?;
    let scene_id = slot
        .session
        .lock()
        .expect("session lock")
        .scene_id()
        .to_string();
    let scene = app.scene(&scene_id)?;
    let opts = app.0.config.script.clone();
    let (result, session) = app.mutate(&slot, |s| s.begin_execution(&scene, &opts));
    let script = result?;
    tokio::task::spawn_blocking(move || {
        let mut robot = app.0.robot.blocking_lock();
        let events = slot.events.clone();
        let outcome = (|| {
            if robot.is_none() {
                *robot = Some(RobotConnection::connect(app.0.config.robot_addr)?);
            }
            let conn = robot.as_mut().expect("connected");
            conn.run_program(&script, |st| {
                let _ = events.send(StreamEvent::State(st.clone()));
            })
        })();
        if matches!(
            outcome,
            Err(LinkError::Transport(_) | LinkError::Protocol(_))
        ) {
            *robot = None;
        }
        drop(robot);
        let _ = app.mutate(&slot, |s| s.finish_execution(outcome));
    });
    Ok((StatusCode::ACCEPTED, session_json(&session)))
}

fn sse_event(name: &str, data: &impl Serialize) -> Result<Event, Infallible> {
    Ok(Event::default()
        .event(name)
        .data(serde_json::to_string(data).expect("event serializes")))
}

async fn stream_session(
    State(app): State<AppState>,
    Path(id): Path<String>,
) -> ApiResult<Sse<impl Stream<Item = Result<Event, Infallible>>>> {
    let slot = app.slot(&id)?;
    // Subscribe before the snapshot so nothing falls between them.
    let rx = slot.events.subscribe();
    let snapshot = slot.session.lock().expect("session lock").clone();
    let seen = snapshot.history().len();
    let finished = snapshot.status().is_terminal();
    let head = stream::once(async move { sse_event("session", &snapshot) });
    let tail = stream::unfold(
        (rx, seen, finished),
        |(mut rx, seen, finished)| async move {
            if finished {
                return None;
            }
            loop {
                match rx.recv().await {
                    Ok(StreamEvent::History(entry)) => {
                        if entry.seq < seen {
                            continue;
                        }
                        let done = entry.status.is_terminal();
                        return Some((sse_event("history", &entry), (rx, entry.seq + 1, done)));
                    }
                    Ok(StreamEvent::State(st)) => {
                        return Some((sse_event("state", &st), (rx, seen, false)));
                    }
                    Err(broadcast::error::RecvError::Lagged(_)) => continue,
                    Err(broadcast::error::RecvError::Closed) => return None,
                }
            }
        },
    );
    Ok(Sse::new(head.chain(tail)).keep_alive(KeepAlive::default()))
}

/// Built-in gesture clips.
pub fn animation_clips() -> Vec<(&'static str, AnimationClip)> {
    let frames = |text: &str| {
        frames_to_clip(
            &parse_frame_format(text, DEFAULT_FRAME_INTERVAL_S).expect("built-in frames parse"),
        )
    };
    vec![
        (
            "bow",
            parse_track_format(fixtures::BOW_ANIM).expect("built-in clip parses"),
        ),
        (
            "shake",
            parse_track_format(fixtures::SHAKE_ANIM).expect("built-in clip parses"),
        ),
        ("yes", frames(fixtures::YES_FRAMES)),
        ("purr", frames(fixtures::PURR_FRAMES)),
        ("laugh", frames(fixtures::LAUGH_FRAMES)),
        ("disappointed", frames(fixtures::DISAPPOINTED_FRAMES)),
    ]
}

pub fn clip_json(clip: &AnimationClip) -> Value {
    let tracks: Vec<Value> = clip
        .tracks()
        .iter()
        .map(|t| {
            let keys: Vec<[f64; 2]> = t.keys().iter().map(|k| [k.time, k.rotation]).collect();
            json!({ "joint_path": t.joint_path, "joint": t.joint(), "keys": keys })
        })
        .collect();
    json!({
        "duration": clip.duration(),
        "direction_signs": clip.direction_signs,
        "tracks": tracks,
        "text": clip.to_track_format(),
    })
}

async fn list_animations() -> Json<Value> {
    let names: Vec<&str> = animation_clips().into_iter().map(|(n, _)| n).collect();
    Json(json!(names))
}

async fn get_animation(Path(name): Path<String>) -> ApiResult<Json<Value>> {
    animation_clips()
        .into_iter()
        .find(|(n, _)| *n == name)
        .map(|(_, clip)| Json(clip_json(&clip)))
        .ok_or_else(|| ApiError::not_found(format!("no animation `{name}`")))
}

#[derive(Debug, Deserialize)]
pub struct AnimationPromptRequest {
    pub instruction: String,
}

async fn animation_prompt(Json(req): Json<AnimationPromptRequest>) -> ApiResult<Json<Value>> {
    let p = build_animation_prompt(&req.instruction, &RigDescription::default())
        .map_err(|e| ApiError::bad_request(e.to_string()))?;
    Ok(Json(json!({
        "prompt": p.bundle.render(),
        "digest": p.bundle.digest(),
        "temperature": p.model.temperature,
    })))
}

/// Serves the API until the listener fails.
pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

//! Prompt assembly, scene summarization and waypoint-reply parsing around an
//! abstract chat-completion client.
//!
//! The model is asked to answer with a fenced block labeled `WAYPOINTS`,
//! one `name: (x, y, z)` line per waypoint. Nothing the model writes is
//! executed. [`ReplayClient`] answers from a fixture file keyed by prompt
//! digest, which keeps every run reproducible offline.

use std::collections::HashMap;
use std::fmt::{self, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::planner::{Provenance, Trajectory, TrajectoryError, Waypoint};
use crate::scene::{ObjectRole, Scene, SceneObject, Vec3};

pub const DEFAULT_MODEL: &str = "gpt-4-1106-preview";
pub const DEFAULT_TEMPERATURE: f64 = 0.1;
pub const REPLY_BLOCK_LABEL: &str = "WAYPOINTS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub model_name: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            model_name: DEFAULT_MODEL.to_string(),
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: 2048,
        }
    }
}

impl ModelConfig {
    pub fn new(
        model_name: impl Into<String>,
        temperature: f64,
        max_tokens: u32,
    ) -> Result<Self, LlmError> {
        if !(0.0..=2.0).contains(&temperature) {
            return Err(LlmError::InvalidConfig(format!(
                "temperature {temperature} outside [0, 2]"
            )));
        }
        Ok(Self {
            model_name: model_name.into(),
            temperature,
            max_tokens,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
        }
    }
}

/// A chat-completion backend. One request in flight per instance.
pub trait ChatClient {
    fn send(&mut self, messages: &[ChatMessage], cfg: &ModelConfig) -> Result<String, LlmError>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Severity {
    Error,
    Note,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub severity: Severity,
    /// 1-based line in the raw reply text.
    pub line: Option<usize>,
    /// 1-based line inside the WAYPOINTS block.
    pub block_line: Option<usize>,
    pub message: String,
}

impl Diagnostic {
    fn error(line: Option<usize>, block_line: Option<usize>, message: impl Into<String>) -> Self {
        Self {
            severity: Severity::Error,
            line,
            block_line,
            message: message.into(),
        }
    }

    fn note(message: impl Into<String>) -> Self {
        Self {
            severity: Severity::Note,
            line: None,
            block_line: None,
            message: message.into(),
        }
    }

    pub fn is_error(&self) -> bool {
        self.severity == Severity::Error
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.severity {
            Severity::Error => "error",
            Severity::Note => "note",
        };
        match (self.line, self.block_line) {
            (Some(l), Some(b)) => write!(f, "{kind}: line {l} (block line {b}): {}", self.message),
            (Some(l), None) => write!(f, "{kind}: line {l}: {}", self.message),
            _ => write!(f, "{kind}: {}", self.message),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LlmReply {
    pub raw_text: String,
    pub parsed: Option<Trajectory>,
    pub parse_diagnostics: Vec<Diagnostic>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("instruction is empty")]
    EmptyInstruction,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("no replay entry for prompt digest {0}")]
    MissingFixture(String),
    #[error("replay fixture: {0}")]
    Fixture(String),
    #[error("reply could not be parsed: {}", render_diagnostics(.diagnostics))]
    ParseFailure {
        raw_text: String,
        diagnostics: Vec<Diagnostic>,
    },
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
}

fn render_diagnostics(diags: &[Diagnostic]) -> String {
    diags
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

// ---------------------------------------------------------------------------
// Instruction tokens and target resolution

/// Lowercased alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetPair {
    pub start: String,
    pub end: String,
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("cannot resolve two target surfaces from `{instruction}`: {reason}")]
pub struct TargetResolutionError {
    pub instruction: String,
    pub reason: String,
}

struct Mention {
    index: usize,
    score: usize,
    position: usize,
}

fn mention(name: &str, instruction: &[String]) -> Option<(usize, usize)> {
    let name_tokens = tokenize(name);
    if name_tokens.is_empty() {
        return None;
    }
    let contiguous = instruction
        .windows(name_tokens.len())
        .position(|w| w == name_tokens.as_slice());
    let matched: Vec<usize> = name_tokens
        .iter()
        .filter_map(|t| instruction.iter().position(|i| i == t))
        .collect();
    if matched.is_empty() {
        return None;
    }
    // A whole-name mention outranks any partial overlap.
    let score = matched.len() + contiguous.map_or(0, |_| name_tokens.len());
    let position = contiguous.unwrap_or_else(|| *matched.iter().min().unwrap());
    Some((score, position))
}

/// Picks the two target surfaces with the strongest token overlap with the
/// instruction, ties broken by scene order. The earlier mention is the start.
pub fn resolve_targets(
    scene: &Scene,
    instruction: &str,
) -> Result<TargetPair, TargetResolutionError> {
    let tokens = tokenize(instruction);
    let fail = |reason: &str| TargetResolutionError {
        instruction: instruction.to_string(),
        reason: reason.to_string(),
    };
    let mut mentions: Vec<Mention> = scene
        .objects
        .iter()
        .enumerate()
        .filter(|(_, o)| o.role == ObjectRole::TargetSurface)
        .filter_map(|(index, o)| {
            mention(&o.name, &tokens).map(|(score, position)| Mention {
                index,
                score,
                position,
            })
        })
        .collect();
    match mentions.len() {
        0 => return Err(fail("no target surface is named")),
        1 => return Err(fail("only one target surface is named")),
        _ => {}
    }
    mentions.sort_by(|a, b| b.score.cmp(&a.score).then(a.index.cmp(&b.index)));
    let (a, b) = (&mentions[0], &mentions[1]);
    let (first, second) = if (b.position, b.index) < (a.position, a.index) {
        (b, a)
    } else {
        (a, b)
    };
    Ok(TargetPair {
        start: scene.objects[first.index].name.clone(),
        end: scene.objects[second.index].name.clone(),
    })
}

/// Identifier-looking words in the instruction (underscored, or letters
/// mixed with digits) that name no scene object.
pub fn unresolved_names(scene: &Scene, instruction: &str) -> Vec<String> {
    instruction
        .split_whitespace()
        .map(|w| w.trim_matches(|c: char| !(c.is_alphanumeric() || c == '_')))
        .filter(|w| {
            let has_alpha = w.chars().any(char::is_alphabetic);
            let has_digit = w.chars().any(|c| c.is_ascii_digit());
            w.contains('_') || (has_alpha && has_digit)
        })
        .filter(|w| !scene.objects.iter().any(|o| o.name.eq_ignore_ascii_case(w)))
        .map(str::to_string)
        .collect()
}

// ---------------------------------------------------------------------------
// Scene summary

fn fmt3(v: f64) -> String {
    let s = format!("{v:.3}");
    if s == "-0.000" {
        "0.000".to_string()
    } else {
        s
    }
}

fn fmt_vec(v: Vec3) -> String {
    format!("({}, {}, {})", fmt3(v.x), fmt3(v.y), fmt3(v.z))
}

fn object_line(o: &SceneObject) -> String {
    format!(
        "- {} [{}] center {} extents {}",
        o.name,
        o.role.as_str(),
        fmt_vec(o.bounds.center),
        fmt_vec(o.bounds.extents)
    )
}

/// Scene description conditioned on the instruction: the robot and sphere,
/// objects sharing a token with the instruction, and every obstacle.
/// An instruction without tokens lists everything.
pub fn summarize_scene(scene: &Scene, instruction: &str) -> String {
    let tokens = tokenize(instruction);
    let robot = scene.robot();
    let mut out = String::new();
    let _ = writeln!(out, "Robot:");
    let _ = writeln!(out, "{}", object_line(robot));
    let _ = writeln!(
        out,
        "Reachability sphere: center {} radius {}",
        fmt_vec(scene.sphere.center),
        fmt3(scene.sphere.radius)
    );
    let _ = writeln!(out, "Objects:");
    for o in scene.objects.iter().filter(|o| o.role != ObjectRole::Robot) {
        let relevant = tokens.is_empty()
            || o.role == ObjectRole::Obstacle
            || tokenize(&o.name).iter().any(|t| tokens.contains(t));
        if relevant {
            let _ = writeln!(out, "{}", object_line(o));
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Prompt

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PromptConfig {
    pub min_waypoints: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self { min_waypoints: 5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptBundle {
    pub system_context: String,
    pub scene_summary: String,
    pub user_instruction: String,
    pub constraints: Vec<String>,
    pub targets: Option<TargetPair>,
    pub diagnostics: Vec<String>,
}

pub const ENDPOINT_SENTENCE: &str =
    "The first and final waypoint should be the start and end destinations.";
pub const COLLISION_SENTENCE: &str = "The middle waypoints should allow the robot to travel in air but these waypoints should avoid colliding with all objects (like table) in the scene.";
pub const ARC_SENTENCE: &str = "The middle waypoints should form some sort of arc or curve.";
pub const SPHERE_SENTENCE: &str =
    "The robot's end point can not reach beyond the reachability sphere.";

fn goal_sentence(min: usize, start: &str, end: &str) -> String {
    format!(
        "Your goal is to find at least {min} waypoints that allows the robot end point to move from the TOP surface of {start} to the TOP surface of {end}."
    )
}

fn reply_format(min: usize) -> String {
    format!(
        "Answer with the final waypoints, each with a unique name, inside a fenced code block labeled {REPLY_BLOCK_LABEL}. \
Write one waypoint per line as `name: (x, y, z)` in meters in the scene coordinates above, z up, at least {min} lines, in travel order. Example:\n\
```{REPLY_BLOCK_LABEL}\nWaypoint_0: (0.5, 0.0, 0.9)\nWaypoint_1: (0.25, 0.0, 1.1)\n```"
    )
}

impl PromptBundle {
    pub fn messages(&self) -> Vec<ChatMessage> {
        let mut user = String::new();
        if !self.scene_summary.is_empty() {
            let _ = writeln!(user, "Scene summary:\n{}", self.scene_summary);
        }
        if !self.constraints.is_empty() {
            let _ = writeln!(user, "Constraints:");
            for c in &self.constraints {
                let _ = writeln!(user, "- {c}");
            }
            user.push('\n');
        }
        user.push_str(&self.user_instruction);
        vec![
            ChatMessage::new(Role::System, &self.system_context),
            ChatMessage::new(Role::User, user),
        ]
    }

    /// The full prompt as sent, one `[role]` header per message.
    pub fn render(&self) -> String {
        render_messages(&self.messages())
    }

    pub fn digest(&self) -> String {
        prompt_digest(&self.messages())
    }
}

pub fn render_messages(messages: &[ChatMessage]) -> String {
    let mut out = String::new();
    for m in messages {
        let role = match m.role {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        };
        let _ = writeln!(out, "[{role}]\n{}", m.content);
    }
    out
}

/// SHA-256 (hex) of the messages before the first assistant turn, so a
/// corrective follow-up shares the digest of the prompt it follows.
pub fn prompt_digest(messages: &[ChatMessage]) -> String {
    let head: Vec<ChatMessage> = messages
        .iter()
        .take_while(|m| m.role != Role::Assistant)
        .cloned()
        .collect();
    hex::encode(Sha256::digest(render_messages(&head).as_bytes()))
}

pub fn build_prompt(
    scene: &Scene,
    instruction: &str,
    cfg: &PromptConfig,
) -> Result<PromptBundle, LlmError> {
    let instruction = instruction.trim();
    if instruction.is_empty() {
        return Err(LlmError::EmptyInstruction);
    }
    let mut diagnostics = Vec::new();
    let targets = match resolve_targets(scene, instruction) {
        Ok(t) => Some(t),
        Err(e) => {
            diagnostics.push(e.to_string());
            None
        }
    };
    for name in unresolved_names(scene, instruction) {
        diagnostics.push(format!("`{name}` does not name any object in the scene"));
    }
    let (start, end) = match &targets {
        Some(t) => (t.start.as_str(), t.end.as_str()),
        None => ("the start location", "the end location"),
    };
    let robot = &scene.robot().name;
    let system_context = format!(
        "You are controlling a robot arm named {robot}. \
You should first establish the mesh boundaries of the objects in the scene. Do not move the robot.\n{}",
        reply_format(cfg.min_waypoints)
    );
    Ok(PromptBundle {
        system_context,
        scene_summary: summarize_scene(scene, instruction),
        user_instruction: format!("User request: {instruction}"),
        constraints: vec![
            goal_sentence(cfg.min_waypoints, start, end),
            ENDPOINT_SENTENCE.to_string(),
            COLLISION_SENTENCE.to_string(),
            ARC_SENTENCE.to_string(),
            SPHERE_SENTENCE.to_string(),
        ],
        targets,
        diagnostics,
    })
}

// ---------------------------------------------------------------------------
// Reply parsing

fn parse_coord_line(line: &str) -> Result<(String, Vec3), String> {
    let (name, rest) = line
        .split_once(':')
        .ok_or_else(|| "expected `name: (x, y, z)`".to_string())?;
    let name = name.trim();
    if name.is_empty() {
        return Err("missing waypoint name".into());
    }
    let rest = rest.trim();
    let inner = rest
        .strip_prefix('(')
        .and_then(|r| r.strip_suffix(')'))
        .ok_or_else(|| format!("expected a parenthesized coordinate triple, got `{rest}`"))?;
    let parts: Vec<&str> = inner.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("expected 3 coordinates, got {}", parts.len()));
    }
    let mut xyz = [0.0; 3];
    for (slot, part) in xyz.iter_mut().zip(&parts) {
        let v: f64 = part
            .parse()
            .map_err(|_| format!("`{part}` is not a decimal number"))?;
        if !v.is_finite() {
            return Err(format!("`{part}` is not finite"));
        }
        *slot = v;
    }
    Ok((name.to_string(), xyz.into()))
}

fn fence_label(line: &str) -> Option<&str> {
    line.trim().strip_prefix("```").map(str::trim)
}

/// Parses the last fenced `WAYPOINTS` block of a reply.
pub fn parse_waypoint_reply(raw: &str) -> Result<Trajectory, LlmError> {
    let failure = |diagnostics| LlmError::ParseFailure {
        raw_text: raw.to_string(),
        diagnostics,
    };
    let lines: Vec<&str> = raw.lines().collect();
    let mut block: Option<(usize, usize)> = None;
    let mut i = 0;
    while i < lines.len() {
        if let Some(label) = fence_label(lines[i]) {
            let close = (i + 1..lines.len()).find(|&j| fence_label(lines[j]) == Some(""));
            let Some(close) = close else {
                if label.eq_ignore_ascii_case(REPLY_BLOCK_LABEL) {
                    return Err(failure(vec![Diagnostic::error(
                        Some(i + 1),
                        None,
                        "unterminated WAYPOINTS block",
                    )]));
                }
                break;
            };
            if label.eq_ignore_ascii_case(REPLY_BLOCK_LABEL) {
                block = Some((i + 1, close));
            }
            i = close + 1;
        } else {
            i += 1;
        }
    }
    let Some((open, close)) = block else {
        return Err(failure(vec![Diagnostic::error(
            None,
            None,
            "no fenced block labeled WAYPOINTS",
        )]));
    };

    let mut diagnostics = Vec::new();
    let mut waypoints: Vec<Waypoint> = Vec::new();
    for (offset, line) in lines[open..close].iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (raw_line, block_line) = (open + offset + 1, offset + 1);
        match parse_coord_line(line) {
            Ok((name, pos)) => {
                if waypoints.iter().any(|w| w.name == name) {
                    diagnostics.push(Diagnostic::error(
                        Some(raw_line),
                        Some(block_line),
                        format!("duplicate waypoint name `{name}`"),
                    ));
                } else {
                    waypoints.push(Waypoint::new(name, pos, Provenance::Llm));
                }
            }
            Err(msg) => diagnostics.push(Diagnostic::error(Some(raw_line), Some(block_line), msg)),
        }
    }
    if !diagnostics.is_empty() {
        return Err(failure(diagnostics));
    }
    if waypoints.is_empty() {
        return Err(failure(vec![Diagnostic::error(
            Some(open),
            None,
            "WAYPOINTS block is empty",
        )]));
    }
    Trajectory::from_waypoints(waypoints)
        .map_err(|e: TrajectoryError| failure(vec![Diagnostic::error(None, None, e.to_string())]))
}

fn corrective_message(diagnostics: &[Diagnostic]) -> String {
    format!(
        "Your previous reply could not be parsed ({}). Reply again with only a fenced code block labeled {REPLY_BLOCK_LABEL} containing one `name: (x, y, z)` line per waypoint.",
        render_diagnostics(diagnostics)
    )
}

/// Sends the prompt, parses the reply and retries once with a corrective
/// message if parsing fails.
pub fn request_waypoints(
    client: &mut dyn ChatClient,
    bundle: &PromptBundle,
    cfg: &ModelConfig,
) -> Result<LlmReply, LlmError> {
    let mut messages = bundle.messages();
    let first = client.send(&messages, cfg)?;
    let first_diags = match parse_waypoint_reply(&first) {
        Ok(traj) => {
            return Ok(LlmReply {
                raw_text: first,
                parsed: Some(traj),
                parse_diagnostics: Vec::new(),
            })
        }
        Err(LlmError::ParseFailure { diagnostics, .. }) => diagnostics,
        Err(e) => return Err(e),
    };
    messages.push(ChatMessage::new(Role::Assistant, first));
    messages.push(ChatMessage::new(
        Role::User,
        corrective_message(&first_diags),
    ));
    let second = client.send(&messages, cfg)?;
    match parse_waypoint_reply(&second) {
        Ok(traj) => {
            let mut notes = vec![Diagnostic::note(
                "first reply was unparseable; retried once",
            )];
            notes.extend(first_diags.into_iter().map(|d| Diagnostic {
                severity: Severity::Note,
                ..d
            }));
            Ok(LlmReply {
                raw_text: second,
                parsed: Some(traj),
                parse_diagnostics: notes,
            })
        }
        Err(LlmError::ParseFailure {
            raw_text,
            diagnostics,
        }) => Err(LlmError::ParseFailure {
            raw_text,
            diagnostics,
        }),
        Err(e) => Err(e),
    }
}

// ---------------------------------------------------------------------------
// Replay client

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ReplayReply {
    One(String),
    /// One reply per attempt; the last repeats once exhausted.
    Attempts(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayEntry {
    pub digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instruction: Option<String>,
    pub reply: ReplayReply,
    /// Validator verdict recorded when the fixture was made.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_overall: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReplayFixture {
    pub entries: Vec<ReplayEntry>,
}

impl ReplayFixture {
    pub fn from_json(text: &str) -> Result<Self, LlmError> {
        serde_json::from_str(text).map_err(|e| LlmError::Fixture(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("fixture serializes")
    }

    pub fn load(path: &Path) -> Result<Self, LlmError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LlmError::Fixture(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn entry(&self, digest: &str) -> Option<&ReplayEntry> {
        self.entries.iter().find(|e| e.digest == digest)
    }
}

/// Answers from canned replies keyed by [`prompt_digest`]. The attempt
/// number is the count of assistant turns already in the conversation, so
/// the same conversation always gets the same reply.
#[derive(Debug, Clone, Default)]
pub struct ReplayClient {
    replies: HashMap<String, Vec<String>>,
}

impl ReplayClient {
    pub fn new(fixture: &ReplayFixture) -> Self {
        let replies = fixture
            .entries
            .iter()
            .map(|e| {
                let replies = match &e.reply {
                    ReplayReply::One(r) => vec![r.clone()],
                    ReplayReply::Attempts(rs) => rs.clone(),
                };
                (e.digest.clone(), replies)
            })
            .collect();
        Self { replies }
    }
}

impl ChatClient for ReplayClient {
    fn send(&mut self, messages: &[ChatMessage], _cfg: &ModelConfig) -> Result<String, LlmError> {
        let digest = prompt_digest(messages);
        let replies = self
            .replies
            .get(&digest)
            .filter(|r| !r.is_empty())
            .ok_or(LlmError::MissingFixture(digest))?;
        let attempt = messages
            .iter()
            .filter(|m| m.role == Role::Assistant)
            .count();
        Ok(replies[attempt.min(replies.len() - 1)].clone())
    }
}

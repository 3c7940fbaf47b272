//! Keyframe clips for expressive gestures.
//!
//! Two text formats are supported. The track format has one line per joint:
//! a slash-separated joint path followed by `(timestamp,rotation)` pairs,
//! plus optional `<joint> clockwise direction: (+-1.0)` lines. The frame
//! format has one `[a,b,c,d,e,f]` row of joint offsets per frame and no
//! timing; frames are spaced uniformly. Playback interpolates linearly in
//! joint space.

use std::fmt::Write as _;

use thiserror::Error;

use crate::kinematics::{clamp_to_limits, JointConfig, KinematicChain, JOINT_COUNT};
use crate::llm::{ModelConfig, PromptBundle};

pub const DEFAULT_FRAME_INTERVAL_S: f64 = 0.5;

const METAPROMPT: &str = include_str!("animation_prompt.txt");

/// Joint paths of the default rig, base first.
pub const CANONICAL_PATHS: [&str; JOINT_COUNT] = [
    "Robot/z-up/root/__base",
    "Robot/z-up/root/__base/__shoulder",
    "Robot/z-up/root/__base/__shoulder/__elbow",
    "Robot/z-up/root/__base/__shoulder/__elbow/__wrist-1",
    "Robot/z-up/root/__base/__shoulder/__elbow/__wrist-1/__wrist-2",
    "Robot/z-up/root/__base/__shoulder/__elbow/__wrist-1/__wrist-2/__wrist-3",
];

const SIGN_NAMES: [&str; JOINT_COUNT] = [
    "__base",
    "__shoulder",
    "__elbow",
    "__wrist-1",
    "__wrist-2",
    "__wrist-3",
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnimationError {
    #[error("line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("instruction is empty")]
    EmptyInstruction,
    #[error("frame interval must be positive, got {0}")]
    BadInterval(f64),
}

fn parse_err(line: usize, column: usize, message: impl Into<String>) -> AnimationError {
    AnimationError::Parse {
        line,
        column,
        message: message.into(),
    }
}

/// Maps the last path segment (`__elbow`, `__wrist-3`, `__wrist3`, ...) to a joint index.
pub fn joint_index(path: &str) -> Option<usize> {
    let leaf = path.rsplit('/').next()?;
    let key: String = leaf
        .trim_start_matches('_')
        .chars()
        .filter(|c| *c != '-' && *c != '_')
        .collect::<String>()
        .to_ascii_lowercase();
    match key.as_str() {
        "base" => Some(0),
        "shoulder" => Some(1),
        "elbow" => Some(2),
        "wrist1" => Some(3),
        "wrist2" => Some(4),
        "wrist3" => Some(5),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keyframe {
    pub time: f64,
    pub rotation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeyframeTrack {
    pub joint_path: String,
    joint: usize,
    keys: Vec<Keyframe>,
}

impl KeyframeTrack {
    /// Keys must be non-empty, finite, start at t >= 0 and strictly increase.
    pub fn new(joint_path: impl Into<String>, keys: Vec<Keyframe>) -> Result<Self, String> {
        let joint_path = joint_path.into();
        let joint = joint_index(&joint_path)
            .ok_or_else(|| format!("unknown joint in path `{joint_path}`"))?;
        check_keys(&keys)?;
        Ok(Self {
            joint_path,
            joint,
            keys,
        })
    }

    pub fn joint(&self) -> usize {
        self.joint
    }

    pub fn keys(&self) -> &[Keyframe] {
        &self.keys
    }

    pub fn duration(&self) -> f64 {
        self.keys.last().map_or(0.0, |k| k.time)
    }

    /// Linear interpolation with constant extrapolation. Exact at key times.
    pub fn value_at(&self, t: f64) -> f64 {
        let keys = &self.keys;
        let after = keys.partition_point(|k| k.time <= t);
        if after == 0 {
            return keys[0].rotation;
        }
        let k0 = keys[after - 1];
        if after == keys.len() || k0.time == t {
            return k0.rotation;
        }
        let k1 = keys[after];
        let s = (t - k0.time) / (k1.time - k0.time);
        k0.rotation + (k1.rotation - k0.rotation) * s
    }
}

fn check_keys(keys: &[Keyframe]) -> Result<(), String> {
    if keys.is_empty() {
        return Err("track needs at least one key".into());
    }
    for k in keys {
        if !k.time.is_finite() || !k.rotation.is_finite() {
            return Err("non-finite key".into());
        }
        if k.time < 0.0 {
            return Err(format!("negative timestamp {}", k.time));
        }
    }
    for w in keys.windows(2) {
        if w[1].time <= w[0].time {
            return Err(format!(
                "timestamps must strictly increase ({} then {})",
                w[0].time, w[1].time
            ));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnimationClip {
    tracks: Vec<KeyframeTrack>,
    /// Rotation-direction multipliers per joint, applied only when producing robot commands.
    pub direction_signs: [f64; JOINT_COUNT],
}

impl AnimationClip {
    pub fn new(
        tracks: Vec<KeyframeTrack>,
        direction_signs: [f64; JOINT_COUNT],
    ) -> Result<Self, String> {
        let mut seen = [false; JOINT_COUNT];
        for t in &tracks {
            if std::mem::replace(&mut seen[t.joint], true) {
                return Err(format!("joint of `{}` has two tracks", t.joint_path));
            }
        }
        if direction_signs.iter().any(|s| *s != 1.0 && *s != -1.0) {
            return Err("direction signs must be +1 or -1".into());
        }
        Ok(Self {
            tracks,
            direction_signs,
        })
    }

    pub fn empty() -> Self {
        Self {
            tracks: Vec::new(),
            direction_signs: [1.0; JOINT_COUNT],
        }
    }

    pub fn tracks(&self) -> &[KeyframeTrack] {
        &self.tracks
    }

    pub fn track(&self, joint: usize) -> Option<&KeyframeTrack> {
        self.tracks.iter().find(|t| t.joint == joint)
    }

    pub fn duration(&self) -> f64 {
        self.tracks
            .iter()
            .map(KeyframeTrack::duration)
            .fold(0.0, f64::max)
    }

    /// Serializes to the track format; floats use shortest round-trip form.
    pub fn to_track_format(&self) -> String {
        let mut out = String::new();
        for (name, sign) in SIGN_NAMES.iter().zip(self.direction_signs) {
            let _ = writeln!(out, "{name} clockwise direction: ({sign:?})");
        }
        for t in &self.tracks {
            out.push_str(&t.joint_path);
            for k in &t.keys {
                let _ = write!(out, ",({:?},{:?})", k.time, k.rotation);
            }
            out.push('\n');
        }
        out
    }
}

/// Byte offset of `part` inside `line`, as a 1-based column.
fn column_of(line: &str, part: &str) -> usize {
    part.as_ptr() as usize - line.as_ptr() as usize + 1
}

fn parse_number(line_no: usize, line: &str, token: &str) -> Result<f64, AnimationError> {
    let trimmed = token.trim();
    trimmed
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| {
            parse_err(
                line_no,
                column_of(line, token),
                format!("`{trimmed}` is not a number"),
            )
        })
}

fn parse_sign_line(
    line_no: usize,
    line: &str,
    name: &str,
    value: &str,
) -> Result<(usize, f64), AnimationError> {
    let joint = joint_index(name.trim())
        .ok_or_else(|| parse_err(line_no, 1, format!("unknown joint `{}`", name.trim())))?;
    let inner = value
        .trim()
        .strip_prefix('(')
        .and_then(|v| v.strip_suffix(')'))
        .ok_or_else(|| parse_err(line_no, column_of(line, value), "expected `(value)`"))?;
    let v = parse_number(line_no, line, inner)?;
    if v != 1.0 && v != -1.0 {
        return Err(parse_err(
            line_no,
            column_of(line, inner),
            "direction must be 1.0 or -1.0",
        ));
    }
    Ok((joint, v))
}

fn parse_track_line(line_no: usize, line: &str) -> Result<KeyframeTrack, AnimationError> {
    let first_paren = line
        .find(",(")
        .ok_or_else(|| parse_err(line_no, 1, "expected `joint/path,(t,r),...`"))?;
    let path = line[..first_paren].trim();
    if path.is_empty() {
        return Err(parse_err(line_no, 1, "missing joint path"));
    }
    let mut keys = Vec::new();
    let mut rest = &line[first_paren + 1..];
    loop {
        let rest_trim = rest.trim_start();
        let open_col = column_of(line, rest_trim);
        let body = rest_trim
            .strip_prefix('(')
            .ok_or_else(|| parse_err(line_no, open_col, "expected `(`"))?;
        let close = body
            .find(')')
            .ok_or_else(|| parse_err(line_no, open_col, "unclosed `(`"))?;
        let pair = &body[..close];
        let (t, r) = pair
            .split_once(',')
            .ok_or_else(|| parse_err(line_no, open_col, "expected `(timestamp,rotation)`"))?;
        let key = Keyframe {
            time: parse_number(line_no, line, t)?,
            rotation: parse_number(line_no, line, r)?,
        };
        if let Some(prev) = keys.last() {
            let prev: &Keyframe = prev;
            if key.time <= prev.time {
                return Err(parse_err(
                    line_no,
                    open_col,
                    format!(
                        "timestamp {} does not increase past {}",
                        key.time, prev.time
                    ),
                ));
            }
        }
        keys.push(key);
        let after = body[close + 1..].trim_start();
        if after.is_empty() {
            break;
        }
        rest = after.strip_prefix(',').ok_or_else(|| {
            parse_err(line_no, column_of(line, after), "expected `,` between keys")
        })?;
    }
    KeyframeTrack::new(path, keys).map_err(|m| parse_err(line_no, 1, m))
}

/// Parses the track format.
pub fn parse_track_format(text: &str) -> Result<AnimationClip, AnimationError> {
    let mut tracks: Vec<KeyframeTrack> = Vec::new();
    let mut signs = [1.0; JOINT_COUNT];
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        if let Some((name, value)) = line.split_once("clockwise direction:") {
            let (joint, v) = parse_sign_line(line_no, line, name, value)?;
            signs[joint] = v;
            continue;
        }
        let track = parse_track_line(line_no, line)?;
        if tracks.iter().any(|t| t.joint == track.joint) {
            return Err(parse_err(
                line_no,
                1,
                format!("second track for `{}`", track.joint_path),
            ));
        }
        tracks.push(track);
    }
    AnimationClip::new(tracks, signs).map_err(|m| parse_err(1, 1, m))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameClip {
    pub frames: Vec<[f64; JOINT_COUNT]>,
    pub frame_interval: f64,
}

/// Parses bracketed six-value rows; other lines (titles, blanks) are skipped.
pub fn parse_frame_format(text: &str, frame_interval: f64) -> Result<FrameClip, AnimationError> {
    if !(frame_interval > 0.0 && frame_interval.is_finite()) {
        return Err(AnimationError::BadInterval(frame_interval));
    }
    let mut frames = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let trimmed = line.trim();
        if !trimmed.starts_with('[') {
            continue;
        }
        let inner = trimmed[1..]
            .strip_suffix(']')
            .ok_or_else(|| parse_err(line_no, column_of(line, trimmed), "missing `]`"))?;
        let parts: Vec<&str> = inner.split(',').collect();
        if parts.len() != JOINT_COUNT {
            return Err(parse_err(
                line_no,
                column_of(line, trimmed),
                format!("expected {JOINT_COUNT} values, got {}", parts.len()),
            ));
        }
        let mut frame = [0.0; JOINT_COUNT];
        for (slot, part) in frame.iter_mut().zip(parts) {
            *slot = parse_number(line_no, line, part)?;
        }
        frames.push(frame);
    }
    Ok(FrameClip {
        frames,
        frame_interval,
    })
}

/// Re-times frame `i` to `t = i * interval` on the six canonical joint paths.
pub fn frames_to_clip(fc: &FrameClip) -> AnimationClip {
    if fc.frames.is_empty() {
        return AnimationClip::empty();
    }
    let tracks = CANONICAL_PATHS
        .iter()
        .enumerate()
        .map(|(j, path)| {
            let keys = fc
                .frames
                .iter()
                .enumerate()
                .map(|(i, f)| Keyframe {
                    time: i as f64 * fc.frame_interval,
                    rotation: f[j],
                })
                .collect();
            KeyframeTrack::new(*path, keys).expect("uniformly spaced keys are valid")
        })
        .collect();
    AnimationClip::new(tracks, [1.0; JOINT_COUNT]).expect("one track per joint")
}

/// Joint angles at time `t`; joints without a track stay at 0.
pub fn sample(clip: &AnimationClip, chain: &KinematicChain, t: f64) -> JointConfig {
    let mut q = JointConfig::HOME;
    for track in &clip.tracks {
        q[track.joint] = track.value_at(t);
    }
    clamp_to_limits(chain, &q)
}

/// Samples the clip at `rate_hz` and applies the direction signs, giving
/// joint commands for the robot.
pub fn to_joint_commands(
    clip: &AnimationClip,
    chain: &KinematicChain,
    rate_hz: f64,
) -> Vec<JointConfig> {
    let dt = 1.0 / rate_hz;
    let steps = (clip.duration() / dt).floor() as usize;
    (0..=steps)
        .map(|i| {
            let mut q = sample(clip, chain, i as f64 * dt);
            for (v, s) in q.0.iter_mut().zip(clip.direction_signs) {
                *v *= s;
            }
            clamp_to_limits(chain, &q)
        })
        .collect()
}

/// Rig context shown to the model: the hierarchy line and direction signs.
#[derive(Debug, Clone, PartialEq)]
pub struct RigDescription {
    pub hierarchy: String,
    pub direction_signs: [f64; JOINT_COUNT],
}

impl Default for RigDescription {
    fn default() -> Self {
        Self {
            hierarchy: "name:Robot,children:[name:z-up,children:[name:root,children:[name:__base,rotation:(0.0),children:[name:__shoulder,rotation:(0.0),children:[name:__elbow,rotation:(0.0),children:[name:__wrist-1,rotation:(0.0),children:[name:__wrist-2,rotation:(0.0),children:[name:__wrist-3,rotation:(0.0)]]]]]]]]".to_string(),
            direction_signs: [1.0, 1.0, -1.0, 1.0, 1.0, 1.0],
        }
    }
}

impl RigDescription {
    pub fn render(&self) -> String {
        let mut out = format!(
            "The object you will animate is a **robot**.\nObject JSON:\n{}\n",
            self.hierarchy
        );
        for (name, sign) in SIGN_NAMES.iter().zip(self.direction_signs) {
            let _ = writeln!(out, "{name} clockwise direction: ({sign:?})");
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnimationPrompt {
    pub bundle: PromptBundle,
    pub model: ModelConfig,
}

/// Few-shot animation prompt: the fixed metaprompt with both worked
/// examples, then the rig and the instruction.
pub fn build_animation_prompt(
    instruction: &str,
    rig: &RigDescription,
) -> Result<AnimationPrompt, AnimationError> {
    let instruction = instruction.trim();
    if instruction.is_empty() {
        return Err(AnimationError::EmptyInstruction);
    }
    let bundle = PromptBundle {
        system_context: METAPROMPT.trim_end().to_string(),
        scene_summary: format!("# Task:\n{}", rig.render()),
        user_instruction: format!("Instruction: {instruction}\n"),
        constraints: Vec::new(),
        targets: None,
        diagnostics: Vec::new(),
    };
    Ok(AnimationPrompt {
        bundle,
        model: ModelConfig::default(),
    })
}

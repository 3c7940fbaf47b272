//! Bundled demo data: a two-stool workspace, a UR10e-like chain and the
//! keyframe listings used as few-shot animation examples.

use crate::kinematics::KinematicChain;
use crate::llm::ReplayFixture;
use crate::scene::{load_scene, Scene};

pub const DEMO_SCENE_JSON: &str = include_str!("../fixtures/demo_scene.json");
/// The demo scene plus an obstacle the planner does not know about.
pub const DEMO_INTRUDER_SCENE_JSON: &str = include_str!("../fixtures/demo_scene_intruder.json");
pub const UR10E_CHAIN_JSON: &str = include_str!("../fixtures/ur10e_chain.json");

/// Canned model replies for three demo instructions: a clean answer, an
/// answer that needs the corrective retry, and one that never parses.
pub const REPLAY_DEMO_JSON: &str = include_str!("../fixtures/replay_demo.json");

pub const BOW_ANIM: &str = include_str!("../fixtures/bow.anim.txt");
pub const SHAKE_ANIM: &str = include_str!("../fixtures/shake.anim.txt");
pub const YES_FRAMES: &str = include_str!("../fixtures/yes.frames.txt");
pub const PURR_FRAMES: &str = include_str!("../fixtures/purr.frames.txt");
pub const LAUGH_FRAMES: &str = include_str!("../fixtures/laugh.frames.txt");
pub const DISAPPOINTED_FRAMES: &str = include_str!("../fixtures/disappointed.frames.txt");

pub fn demo_scene() -> Scene {
    load_scene(DEMO_SCENE_JSON)
        .expect("demo scene is valid")
        .scene
}

pub fn demo_intruder_scene() -> Scene {
    load_scene(DEMO_INTRUDER_SCENE_JSON)
        .expect("intruder scene is valid")
        .scene
}

pub fn demo_chain() -> KinematicChain {
    KinematicChain::ur10e_like()
}

pub fn demo_replay() -> ReplayFixture {
    ReplayFixture::from_json(REPLAY_DEMO_JSON).expect("replay fixture is valid")
}

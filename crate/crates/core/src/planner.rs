//! Reference arc planner and trajectory validator.
//!
//! The planner lerps between two targets and lifts interior waypoints above
//! the tallest obstacle or target surface, then pulls them back into the reachability sphere.
//! Endpoints are never moved. The validator checks a trajectory against the
//! scene: sphere containment, point-in-box collisions, IK reachability, the
//! arc shape and endpoint agreement. Segments between waypoints are not
//! checked; the controller plans those.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{self, IkConfig, JointConfig, KinematicChain};
use crate::scene::{ObjectRole, Scene, Vec3};

pub const DEFAULT_WAYPOINT_COUNT: usize = 5;
pub const DEFAULT_LIFT_M: f64 = 0.1;
/// Display scale of waypoint markers, consumed by viewers only.
pub const WAYPOINT_DISPLAY_SCALE: f64 = 0.1;
pub const ENDPOINT_TOLERANCE_M: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Reference,
    Llm,
    HumanEdit,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Reference => "reference",
            Provenance::Llm => "llm",
            Provenance::HumanEdit => "human-edit",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub name: String,
    pub position: Vec3,
    pub provenance: Provenance,
}

impl Waypoint {
    pub fn new(name: impl Into<String>, position: Vec3, provenance: Provenance) -> Self {
        Self {
            name: name.into(),
            position,
            provenance,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrajectoryError {
    #[error("duplicate waypoint name `{0}`")]
    DuplicateName(String),
    #[error("waypoint name must be non-empty")]
    EmptyName,
    #[error("waypoint `{0}` has a non-finite coordinate")]
    NonFinite(String),
    #[error("start/end target has a non-finite coordinate")]
    NonFiniteTarget,
    #[error("waypoint index {index} out of range for {len} waypoints")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("trajectory document: {0}")]
    Document(String),
}

/// Ordered waypoints in scene coordinates plus the intended start and end.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    waypoints: Vec<Waypoint>,
    pub start_target: Vec3,
    pub end_target: Vec3,
}

#[derive(Deserialize)]
struct TrajectoryDoc {
    waypoints: Vec<Waypoint>,
    start_target: Vec3,
    end_target: Vec3,
}

impl<'de> Deserialize<'de> for Trajectory {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let doc = TrajectoryDoc::deserialize(d)?;
        Trajectory::new(doc.waypoints, doc.start_target, doc.end_target)
            .map_err(serde::de::Error::custom)
    }
}

impl Trajectory {
    pub fn new(
        waypoints: Vec<Waypoint>,
        start_target: Vec3,
        end_target: Vec3,
    ) -> Result<Self, TrajectoryError> {
        if !start_target.is_finite() || !end_target.is_finite() {
            return Err(TrajectoryError::NonFiniteTarget);
        }
        let mut names = HashSet::new();
        for wp in &waypoints {
            if wp.name.is_empty() {
                return Err(TrajectoryError::EmptyName);
            }
            if !wp.position.is_finite() {
                return Err(TrajectoryError::NonFinite(wp.name.clone()));
            }
            if !names.insert(wp.name.as_str()) {
                return Err(TrajectoryError::DuplicateName(wp.name.clone()));
            }
        }
        Ok(Self {
            waypoints,
            start_target,
            end_target,
        })
    }

    /// Uses the first and last waypoint as the start and end targets.
    pub fn from_waypoints(waypoints: Vec<Waypoint>) -> Result<Self, TrajectoryError> {
        let start = waypoints.first().map_or(Vec3::ZERO, |w| w.position);
        let end = waypoints.last().map_or(Vec3::ZERO, |w| w.position);
        Self::new(waypoints, start, end)
    }

    pub fn waypoints(&self) -> &[Waypoint] {
        &self.waypoints
    }

    pub fn positions(&self) -> impl Iterator<Item = Vec3> + '_ {
        self.waypoints.iter().map(|w| w.position)
    }

    pub fn len(&self) -> usize {
        self.waypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waypoints.is_empty()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trajectory serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, TrajectoryError> {
        serde_json::from_str(text).map_err(|e| TrajectoryError::Document(e.to_string()))
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("{which} target {point} lies outside the reachability sphere")]
    InvalidEndpoint { which: &'static str, point: Vec3 },
    #[error("need at least 2 waypoints, got {0}")]
    DegenerateCount(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArcParams {
    pub count: usize,
    /// Clearance above the tallest solid object, meters.
    pub lift: f64,
}

impl Default for ArcParams {
    fn default() -> Self {
        Self {
            count: DEFAULT_WAYPOINT_COUNT,
            lift: DEFAULT_LIFT_M,
        }
    }
}

/// Lerped waypoints from `start` to `end` with interior points lifted clear of every solid object.
pub fn generate_arc_waypoints(
    scene: &Scene,
    start: Vec3,
    end: Vec3,
    params: ArcParams,
) -> Result<Trajectory, PlanError> {
    let n = params.count;
    if n < 2 {
        return Err(PlanError::DegenerateCount(n));
    }
    for (which, point) in [("start", start), ("end", end)] {
        if !point.is_finite() || !scene.sphere.contains(point) {
            return Err(PlanError::InvalidEndpoint { which, point });
        }
    }
    let top = scene.max_solid_top();
    let last = n - 1;
    let waypoints = (0..n)
        .map(|i| {
            let position = if i == 0 {
                start
            } else if i == last {
                end
            } else {
                let t = i as f64 / last as f64;
                let mut p = start.lerp(end, t);
                if let Some(top) = top {
                    if p.z <= top {
                        p.z = top + params.lift;
                    }
                }
                scene.sphere.closest_point(p)
            };
            Waypoint::new(format!("Waypoint_{i}"), position, Provenance::Reference)
        })
        .collect();
    Ok(Trajectory::new(waypoints, start, end).expect("generated names are unique"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaypointCheck {
    pub name: String,
    pub in_sphere: bool,
    pub collides_with: Vec<String>,
    pub reachable_ik: bool,
}

impl WaypointCheck {
    pub fn is_clean(&self) -> bool {
        self.in_sphere && self.collides_with.is_empty() && self.reachable_ik
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub waypoints: Vec<WaypointCheck>,
    pub arc_ok: bool,
    pub endpoints_ok: bool,
    pub overall: bool,
}

impl ValidationReport {
    /// Human-readable reasons the report is not clean.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.waypoints.is_empty() {
            out.push("trajectory is empty".to_string());
        }
        for w in &self.waypoints {
            if !w.in_sphere {
                out.push(format!("{} is outside the reachability sphere", w.name));
            }
            if !w.collides_with.is_empty() {
                out.push(format!(
                    "{} collides with {}",
                    w.name,
                    w.collides_with.join(", ")
                ));
            }
            if !w.reachable_ik {
                out.push(format!("{} is not reachable by IK", w.name));
            }
        }
        if !self.arc_ok {
            out.push("no interior waypoint rises above the endpoints".to_string());
        }
        if !self.endpoints_ok {
            out.push("first/last waypoint differ from the start/end targets".to_string());
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationConfig {
    pub ik: IkConfig,
    /// Seed for the first waypoint; later waypoints start from the previous solution.
    pub seed: JointConfig,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self {
            ik: IkConfig::default(),
            seed: JointConfig::HOME,
        }
    }
}

pub fn validate(scene: &Scene, chain: &KinematicChain, traj: &Trajectory) -> ValidationReport {
    validate_with(scene, chain, traj, &ValidationConfig::default())
}

pub fn validate_with(
    scene: &Scene,
    chain: &KinematicChain,
    traj: &Trajectory,
    cfg: &ValidationConfig,
) -> ValidationReport {
    let wps = traj.waypoints();
    let last = wps.len().saturating_sub(1);
    let solids: Vec<_> = scene.objects.iter().filter(|o| o.role.is_solid()).collect();

    let mut seed = cfg.seed;
    let mut checks = Vec::with_capacity(wps.len());
    for (i, wp) in wps.iter().enumerate() {
        let p = wp.position;
        let own_target = match i {
            0 => Some(traj.start_target),
            _ if i == last => Some(traj.end_target),
            _ => None,
        };
        let collides_with = solids
            .iter()
            .filter(|o| o.bounds.contains(p))
            .filter(|o| {
                !(o.role == ObjectRole::TargetSurface
                    && own_target.is_some_and(|t| o.bounds.contains(t)))
            })
            .map(|o| o.name.clone())
            .collect();

        let local = chain.base_pose.to_base(p);
        let reachable_ik = match kinematics::ik_with_fallback(chain, local, &seed, &cfg.ik) {
            Ok(sol) if sol.converged => {
                seed = sol.q;
                true
            }
            _ => false,
        };
        checks.push(WaypointCheck {
            name: wp.name.clone(),
            in_sphere: scene.sphere.contains(p),
            collides_with,
            reachable_ik,
        });
    }

    let peak = traj.start_target.z.max(traj.end_target.z);
    let arc_ok = wps.len() > 2 && wps[1..last].iter().any(|w| w.position.z > peak);
    let endpoints_ok = match (wps.first(), wps.last()) {
        (Some(first), Some(last)) => {
            first.position.distance(traj.start_target) <= ENDPOINT_TOLERANCE_M
                && last.position.distance(traj.end_target) <= ENDPOINT_TOLERANCE_M
        }
        _ => false,
    };
    let overall =
        !checks.is_empty() && checks.iter().all(WaypointCheck::is_clean) && arc_ok && endpoints_ok;
    ValidationReport {
        waypoints: checks,
        arc_ok,
        endpoints_ok,
        overall,
    }
}

/// Moves one waypoint and marks it as a human edit. Validation is left to the caller.
pub fn apply_edit(
    traj: &Trajectory,
    index: usize,
    new_pos: Vec3,
) -> Result<Trajectory, TrajectoryError> {
    let len = traj.len();
    if index >= len {
        return Err(TrajectoryError::IndexOutOfRange { index, len });
    }
    let mut waypoints = traj.waypoints.clone();
    let wp = &mut waypoints[index];
    if !new_pos.is_finite() {
        return Err(TrajectoryError::NonFinite(wp.name.clone()));
    }
    wp.position = new_pos;
    wp.provenance = Provenance::HumanEdit;
    Ok(Trajectory {
        waypoints,
        start_target: traj.start_target,
        end_target: traj.end_target,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::scene::{BasePose, ReachabilitySphere, SceneObject};

    fn arc_fixture() -> (Scene, Trajectory) {
        let scene = fixtures::demo_scene();
        let traj = generate_arc_waypoints(
            &scene,
            Vec3::new(0.5, 0.0, 0.9),
            Vec3::new(-0.5, 0.0, 0.9),
            ArcParams::default(),
        )
        .unwrap();
        (scene, traj)
    }

    #[test]
    fn arc_fixture_positions() {
        let (_, traj) = arc_fixture();
        let expected = [
            Vec3::new(0.5, 0.0, 0.9),
            Vec3::new(0.25, 0.0, 1.1),
            Vec3::new(0.0, 0.0, 1.1),
            Vec3::new(-0.25, 0.0, 1.1),
            Vec3::new(-0.5, 0.0, 0.9),
        ];
        assert_eq!(traj.len(), 5);
        for (i, (wp, e)) in traj.waypoints().iter().zip(expected).enumerate() {
            assert_eq!(wp.name, format!("Waypoint_{i}"));
            assert_eq!(wp.provenance, Provenance::Reference);
            assert!(wp.position.distance(e) <= 1e-9, "{i}: {}", wp.position);
        }
    }

    #[test]
    fn equal_endpoints_repeat() {
        let scene = Scene::new(
            vec![SceneObject::new(
                "R",
                ObjectRole::Robot,
                Vec3::ZERO,
                Vec3::new(0.1, 0.1, 0.1),
            )],
            ReachabilitySphere::new(Vec3::ZERO, 1.3),
            BasePose::identity(),
        )
        .unwrap();
        let p = Vec3::new(0.4, 0.3, 0.5);
        let traj = generate_arc_waypoints(&scene, p, p, ArcParams::default()).unwrap();
        assert!(traj.positions().all(|q| q == p));
    }

    #[test]
    fn endpoint_outside_sphere_rejected() {
        let scene = fixtures::demo_scene();
        let err = generate_arc_waypoints(
            &scene,
            Vec3::new(0.0, 0.0, 2.0),
            Vec3::new(-0.5, 0.0, 0.9),
            ArcParams::default(),
        )
        .unwrap_err();
        assert!(matches!(
            err,
            PlanError::InvalidEndpoint { which: "start", .. }
        ));
        let err = generate_arc_waypoints(
            &scene,
            Vec3::new(0.5, 0.0, 0.9),
            Vec3::new(-0.5, 0.0, 0.9),
            ArcParams {
                count: 1,
                lift: 0.1,
            },
        )
        .unwrap_err();
        assert_eq!(err, PlanError::DegenerateCount(1));
    }

    #[test]
    fn fixture_trajectory_validates() {
        let (scene, traj) = arc_fixture();
        let chain = fixtures::demo_chain();
        let report = validate(&scene, &chain, &traj);
        assert!(report.arc_ok);
        assert!(report.endpoints_ok);
        assert!(report.waypoints.iter().all(|w| w.reachable_ik));
        assert!(report.overall, "{:?}", report.problems());
    }

    #[test]
    fn targets_taller_than_obstacles_still_arc() {
        let mut scene = fixtures::demo_scene();
        scene.objects.retain(|o| o.name != "Table");
        let start = scene.object("Stool_1").unwrap().top_center();
        let end = scene.object("Stool_2").unwrap().top_center();
        let traj = generate_arc_waypoints(&scene, start, end, ArcParams::default()).unwrap();
        // Interior points clear the stool tops (0.9) by the lift.
        assert!(traj.waypoints()[1..4]
            .iter()
            .all(|w| (w.position.z - 1.0).abs() < 1e-12));
        let report = validate(&scene, &fixtures::demo_chain(), &traj);
        assert!(report.overall, "{:?}", report.problems());
    }

    #[test]
    fn waypoint_inside_table_is_flagged() {
        let (scene, traj) = arc_fixture();
        let table = scene.object("Table").unwrap().bounds.center;
        let edited = apply_edit(&traj, 2, table).unwrap();
        let report = validate(&scene, &fixtures::demo_chain(), &edited);
        assert!(!report.overall);
        assert_eq!(report.waypoints[2].collides_with, vec!["Table".to_string()]);
    }

    #[test]
    fn two_point_line_has_no_arc() {
        let scene = fixtures::demo_scene();
        let traj = generate_arc_waypoints(
            &scene,
            Vec3::new(0.5, 0.0, 0.9),
            Vec3::new(-0.5, 0.0, 0.9),
            ArcParams {
                count: 2,
                lift: 0.1,
            },
        )
        .unwrap();
        let report = validate(&scene, &fixtures::demo_chain(), &traj);
        assert!(!report.arc_ok);
        assert!(!report.overall);
    }

    #[test]
    fn edit_changes_one_waypoint() {
        let (_, traj) = arc_fixture();
        let target = traj.waypoints()[2].position + Vec3::new(0.0, 0.0, 0.2);
        let edited = apply_edit(&traj, 2, target).unwrap();
        for (i, (a, b)) in traj.waypoints().iter().zip(edited.waypoints()).enumerate() {
            if i == 2 {
                assert_eq!(b.position, target);
                assert_eq!(b.provenance, Provenance::HumanEdit);
            } else {
                assert_eq!(a, b);
            }
        }
        assert_eq!(
            apply_edit(&traj, 99, target).unwrap_err(),
            TrajectoryError::IndexOutOfRange { index: 99, len: 5 }
        );
    }

    #[test]
    fn moved_endpoint_breaks_endpoints_ok() {
        let (scene, traj) = arc_fixture();
        let edited = apply_edit(&traj, 4, Vec3::new(-0.5, 0.2, 0.9)).unwrap();
        let report = validate(&scene, &fixtures::demo_chain(), &edited);
        assert!(!report.endpoints_ok);
        assert!(!report.overall);
    }

    #[test]
    fn empty_trajectory_fails_validation() {
        let scene = fixtures::demo_scene();
        let traj = Trajectory::new(vec![], Vec3::ZERO, Vec3::ZERO).unwrap();
        let report = validate(&scene, &fixtures::demo_chain(), &traj);
        assert!(!report.overall);
    }

    #[test]
    fn document_round_trip_and_rejects_duplicates() {
        let (_, traj) = arc_fixture();
        assert_eq!(Trajectory::from_json(&traj.to_json()).unwrap(), traj);
        let dup = r#"{"waypoints":[
            {"name":"A","position":[0,0,0],"provenance":"llm"},
            {"name":"A","position":[1,0,0],"provenance":"llm"}],
            "start_target":[0,0,0],"end_target":[1,0,0]}"#;
        assert!(Trajectory::from_json(dup).is_err());
    }
}

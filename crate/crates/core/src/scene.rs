//! Semantic replica of the robot workspace.
//!
//! A [`Scene`] is a flat list of named, axis-aligned boxes plus the robot
//! base pose and a spherical bound on the end-effector's reach. The world
//! frame is right-handed with +z up. Scenes are immutable once loaded.

use std::collections::HashSet;
use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

/// Default reach bound for the bundled UR10e-like fixture, in meters.
pub const DEFAULT_SPHERE_RADIUS: f64 = 1.3;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 {
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn dot(self, other: Vec3) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn norm_squared(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_squared().sqrt()
    }

    pub fn distance(self, other: Vec3) -> f64 {
        (self - other).norm()
    }

    /// Linear interpolation; `t = 0` returns `self` and `t = 1` returns `other` exactly.
    pub fn lerp(self, other: Vec3, t: f64) -> Vec3 {
        if t == 1.0 {
            return other;
        }
        self + (other - self) * t
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

impl From<[f64; 3]> for Vec3 {
    fn from(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }
}

impl From<Vec3> for [f64; 3] {
    fn from(v: Vec3) -> Self {
        v.to_array()
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

impl fmt::Display for Vec3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.x, self.y, self.z)
    }
}

/// Axis-aligned box stored as center and half-sizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub center: Vec3,
    pub extents: Vec3,
}

impl Aabb {
    pub fn new(center: Vec3, extents: Vec3) -> Self {
        Self { center, extents }
    }

    pub fn min(&self) -> Vec3 {
        self.center - self.extents
    }

    pub fn max(&self) -> Vec3 {
        self.center + self.extents
    }

    /// Inclusive point containment.
    pub fn contains(&self, p: Vec3) -> bool {
        let (lo, hi) = (self.min(), self.max());
        lo.x <= p.x && p.x <= hi.x && lo.y <= p.y && p.y <= hi.y && lo.z <= p.z && p.z <= hi.z
    }

    /// Center of the top (+z) face.
    pub fn top_center(&self) -> Vec3 {
        self.center + Vec3::new(0.0, 0.0, self.extents.z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectRole {
    Obstacle,
    TargetSurface,
    Robot,
    Marker,
}

impl ObjectRole {
    pub fn as_str(self) -> &'static str {
        match self {
            ObjectRole::Obstacle => "obstacle",
            ObjectRole::TargetSurface => "target-surface",
            ObjectRole::Robot => "robot",
            ObjectRole::Marker => "marker",
        }
    }

    /// Obstacles and target surfaces are the solid objects the arm must not enter.
    pub fn is_solid(self) -> bool {
        matches!(self, ObjectRole::Obstacle | ObjectRole::TargetSurface)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub name: String,
    pub bounds: Aabb,
    pub role: ObjectRole,
}

impl SceneObject {
    pub fn new(name: impl Into<String>, role: ObjectRole, center: Vec3, extents: Vec3) -> Self {
        Self {
            name: name.into(),
            bounds: Aabb::new(center, extents),
            role,
        }
    }

    pub fn top_center(&self) -> Vec3 {
        self.bounds.top_center()
    }
}

/// Conservative spherical bound on end-effector reach.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReachabilitySphere {
    pub center: Vec3,
    pub radius: f64,
}

impl ReachabilitySphere {
    pub fn new(center: Vec3, radius: f64) -> Self {
        Self { center, radius }
    }

    /// Inclusive of the boundary.
    pub fn contains(&self, p: Vec3) -> bool {
        (p - self.center).norm() <= self.radius
    }

    /// Radial projection onto the sphere for outside points, identity otherwise.
    pub fn closest_point(&self, p: Vec3) -> Vec3 {
        if self.contains(p) {
            return p;
        }
        let offset = p - self.center;
        let dist = offset.norm();
        if dist == 0.0 {
            return p;
        }
        let mut scale = self.radius / dist;
        let mut projected = self.center + offset * scale;
        // Rounding can leave the projection a hair outside; pull it back in.
        while !self.contains(projected) {
            scale *= 1.0 - 4.0 * f64::EPSILON;
            projected = self.center + offset * scale;
        }
        projected
    }
}

/// Robot base placement in the world frame: position plus yaw about +z.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BasePose {
    pub position: Vec3,
    pub yaw: f64,
}

impl BasePose {
    pub fn identity() -> Self {
        Self::default()
    }

    /// World point expressed in the robot base frame.
    pub fn to_base(&self, world: Vec3) -> Vec3 {
        let d = world - self.position;
        let (s, c) = self.yaw.sin_cos();
        Vec3::new(c * d.x + s * d.y, -s * d.x + c * d.y, d.z)
    }

    /// Base-frame point expressed in the world frame.
    pub fn to_world(&self, base: Vec3) -> Vec3 {
        if self.yaw == 0.0 {
            return base + self.position;
        }
        let (s, c) = self.yaw.sin_cos();
        Vec3::new(c * base.x - s * base.y, s * base.x + c * base.y, base.z) + self.position
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
    pub sphere: ReachabilitySphere,
    pub base_pose: BasePose,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("duplicate object name `{0}`")]
    DuplicateName(String),
    #[error("reachability sphere radius must be positive, got {0}")]
    NonPositiveRadius(f64),
    #[error("scene has no object with role robot")]
    MissingRobot,
    #[error("scene has more than one robot object ({0} and {1})")]
    MultipleRobots(String, String),
    #[error("object name must be non-empty")]
    EmptyName,
    #[error("object `{0}` has a negative extent")]
    NegativeExtent(String),
    #[error("object `{0}` needs a positive extent on at least one axis")]
    DegenerateSolid(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
}

impl SceneError {
    pub fn is_syntax(&self) -> bool {
        matches!(self, SceneError::Syntax { .. })
    }
}

/// Non-fatal notes produced while loading, e.g. ignored keys.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadWarning {
    pub path: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedScene {
    pub scene: Scene,
    pub warnings: Vec<LoadWarning>,
}

impl Scene {
    /// Builds a scene and checks every invariant.
    pub fn new(
        objects: Vec<SceneObject>,
        sphere: ReachabilitySphere,
        base_pose: BasePose,
    ) -> Result<Self, SceneError> {
        let scene = Scene {
            objects,
            sphere,
            base_pose,
        };
        scene.check()?;
        Ok(scene)
    }

    fn check(&self) -> Result<(), SceneError> {
        if !self.sphere.center.is_finite() || !self.sphere.radius.is_finite() {
            return Err(SceneError::NonFinite("reachability_sphere".into()));
        }
        if self.sphere.radius <= 0.0 {
            return Err(SceneError::NonPositiveRadius(self.sphere.radius));
        }
        if !self.base_pose.position.is_finite() || !self.base_pose.yaw.is_finite() {
            return Err(SceneError::NonFinite("base_pose".into()));
        }
        let mut seen = HashSet::new();
        let mut robot: Option<&str> = None;
        for obj in &self.objects {
            if obj.name.is_empty() {
                return Err(SceneError::EmptyName);
            }
            if !seen.insert(obj.name.as_str()) {
                return Err(SceneError::DuplicateName(obj.name.clone()));
            }
            if !obj.bounds.center.is_finite() || !obj.bounds.extents.is_finite() {
                return Err(SceneError::NonFinite(obj.name.clone()));
            }
            let e = obj.bounds.extents;
            if e.x < 0.0 || e.y < 0.0 || e.z < 0.0 {
                return Err(SceneError::NegativeExtent(obj.name.clone()));
            }
            if obj.role.is_solid() && !(e.x > 0.0 || e.y > 0.0 || e.z > 0.0) {
                return Err(SceneError::DegenerateSolid(obj.name.clone()));
            }
            if obj.role == ObjectRole::Robot {
                if let Some(first) = robot {
                    return Err(SceneError::MultipleRobots(first.into(), obj.name.clone()));
                }
                robot = Some(&obj.name);
            }
        }
        if robot.is_none() {
            return Err(SceneError::MissingRobot);
        }
        Ok(())
    }

    pub fn object(&self, name: &str) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.name == name)
    }

    pub fn robot(&self) -> &SceneObject {
        self.objects
            .iter()
            .find(|o| o.role == ObjectRole::Robot)
            .expect("scene invariant: exactly one robot")
    }

    pub fn with_role(&self, role: ObjectRole) -> impl Iterator<Item = &SceneObject> {
        self.objects.iter().filter(move |o| o.role == role)
    }

    /// Highest top face among solid objects (obstacles and target surfaces), if there are any.
    pub fn max_solid_top(&self) -> Option<f64> {
        self.objects
            .iter()
            .filter(|o| o.role.is_solid())
            .map(|o| o.bounds.max().z)
            .fold(None, |acc, z| Some(acc.map_or(z, |a: f64| a.max(z))))
    }

    /// Parses a scene document.
    pub fn load(source: &str) -> Result<LoadedScene, SceneError> {
        load_scene(source)
    }

    pub fn to_json(&self) -> String {
        let doc = SceneDoc {
            objects: self
                .objects
                .iter()
                .map(|o| ObjectDoc {
                    name: o.name.clone(),
                    role: o.role,
                    center: o.bounds.center,
                    extents: o.bounds.extents,
                })
                .collect(),
            reachability_sphere: self.sphere,
            base_pose: self.base_pose,
        };
        serde_json::to_string_pretty(&doc).expect("scene serializes")
    }
}

pub fn top_center(obj: &SceneObject) -> Vec3 {
    obj.top_center()
}

pub fn sphere_contains(sphere: &ReachabilitySphere, p: Vec3) -> bool {
    sphere.contains(p)
}

pub fn sphere_closest_point(sphere: &ReachabilitySphere, p: Vec3) -> Vec3 {
    sphere.closest_point(p)
}

pub fn aabb_contains(b: &Aabb, p: Vec3) -> bool {
    b.contains(p)
}

#[derive(Serialize, Deserialize)]
struct ObjectDoc {
    name: String,
    role: ObjectRole,
    center: Vec3,
    extents: Vec3,
}

#[derive(Serialize, Deserialize)]
struct SceneDoc {
    objects: Vec<ObjectDoc>,
    reachability_sphere: ReachabilitySphere,
    #[serde(default)]
    base_pose: BasePose,
}

const TOP_KEYS: &[&str] = &["objects", "reachability_sphere", "base_pose"];
const OBJECT_KEYS: &[&str] = &["name", "role", "center", "extents"];
const SPHERE_KEYS: &[&str] = &["center", "radius"];
const POSE_KEYS: &[&str] = &["position", "yaw"];

fn note_unknown(value: &Value, known: &[&str], path: &str, out: &mut Vec<LoadWarning>) {
    if let Value::Object(map) = value {
        for key in map.keys().filter(|k| !known.contains(&k.as_str())) {
            out.push(LoadWarning {
                path: if path.is_empty() {
                    key.clone()
                } else {
                    format!("{path}.{key}")
                },
                message: "unknown key ignored".into(),
            });
        }
    }
}

/// Parses the JSON scene document. Unknown keys are dropped and reported as warnings.
pub fn load_scene(source: &str) -> Result<LoadedScene, SceneError> {
    let syntax = |e: serde_json::Error| SceneError::Syntax {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    };
    let value: Value = serde_json::from_str(source).map_err(syntax)?;

    let mut warnings = Vec::new();
    note_unknown(&value, TOP_KEYS, "", &mut warnings);
    if let Some(Value::Array(objs)) = value.get("objects") {
        for (i, obj) in objs.iter().enumerate() {
            note_unknown(obj, OBJECT_KEYS, &format!("objects[{i}]"), &mut warnings);
        }
    }
    if let Some(s) = value.get("reachability_sphere") {
        note_unknown(s, SPHERE_KEYS, "reachability_sphere", &mut warnings);
    }
    if let Some(p) = value.get("base_pose") {
        note_unknown(p, POSE_KEYS, "base_pose", &mut warnings);
    }

    // Structural errors (missing keys, wrong types) are reported against the
    // original text so the line number is meaningful.
    let doc: SceneDoc = serde_json::from_str(source).map_err(syntax)?;
    let objects = doc
        .objects
        .into_iter()
        .map(|o| SceneObject::new(o.name, o.role, o.center, o.extents))
        .collect();
    let scene = Scene::new(objects, doc.reachability_sphere, doc.base_pose)?;
    Ok(LoadedScene { scene, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
  "objects": [
    {"name": "UR10e", "role": "robot", "center": [0, 0, 0.1], "extents": [0.1, 0.1, 0.1]}
  ],
  "reachability_sphere": {"center": [0, 0, 0], "radius": 1.3},
  "base_pose": {"position": [0, 0, 0], "yaw": 0}
}"#;

    #[test]
    fn loads_minimal_scene() {
        let loaded = load_scene(MINIMAL).unwrap();
        assert!(loaded.warnings.is_empty());
        let s = loaded.scene;
        assert_eq!(s.objects.len(), 1);
        assert_eq!(s.robot().name, "UR10e");
        assert_eq!(s.robot().bounds.center, Vec3::new(0.0, 0.0, 0.1));
        assert_eq!(s.sphere.radius, 1.3);
        assert_eq!(s.sphere.center, Vec3::ZERO);
    }

    #[test]
    fn rejects_duplicate_names() {
        let src = r#"{"objects": [
            {"name": "R", "role": "robot", "center": [0,0,0], "extents": [0.1,0.1,0.1]},
            {"name": "Stool_1", "role": "target-surface", "center": [1,0,0], "extents": [0.1,0.1,0.1]},
            {"name": "Stool_1", "role": "target-surface", "center": [2,0,0], "extents": [0.1,0.1,0.1]}
        ], "reachability_sphere": {"center": [0,0,0], "radius": 1.3}}"#;
        assert_eq!(
            load_scene(src).unwrap_err(),
            SceneError::DuplicateName("Stool_1".into())
        );
    }

    #[test]
    fn rejects_zero_radius() {
        let src = MINIMAL.replace("\"radius\": 1.3", "\"radius\": 0");
        assert_eq!(
            load_scene(&src).unwrap_err(),
            SceneError::NonPositiveRadius(0.0)
        );
    }

    #[test]
    fn rejects_missing_robot() {
        let src = MINIMAL.replace("\"robot\"", "\"marker\"");
        assert_eq!(load_scene(&src).unwrap_err(), SceneError::MissingRobot);
    }

    #[test]
    fn syntax_error_reports_line() {
        let src = "{\n  \"objects\": [\n    {\"name\": }\n  ]\n}";
        match load_scene(src).unwrap_err() {
            SceneError::Syntax { line, .. } => assert_eq!(line, 3),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn unknown_keys_become_warnings() {
        let src = MINIMAL.replacen("\"objects\"", "\"comment\": \"scanned\", \"objects\"", 1);
        let loaded = load_scene(&src).unwrap();
        assert_eq!(loaded.warnings.len(), 1);
        assert_eq!(loaded.warnings[0].path, "comment");
    }

    #[test]
    fn top_center_examples() {
        let obj = |c: [f64; 3], e: [f64; 3]| {
            SceneObject::new("o", ObjectRole::Obstacle, c.into(), e.into())
        };
        assert_eq!(
            top_center(&obj([1.0, 0.0, 0.25], [0.2, 0.2, 0.25])),
            Vec3::new(1.0, 0.0, 0.5)
        );
        assert_eq!(top_center(&obj([0.0; 3], [0.0; 3])), Vec3::ZERO);
        assert_eq!(
            top_center(&obj([-0.5, 0.8, 0.35], [0.3, 0.3, 0.35])),
            Vec3::new(-0.5, 0.8, 0.7)
        );
    }

    #[test]
    fn sphere_examples() {
        let s = ReachabilitySphere::new(Vec3::ZERO, 1.3);
        assert!(sphere_contains(&s, Vec3::ZERO));
        assert!(sphere_contains(&s, Vec3::new(1.3, 0.0, 0.0)));
        assert!(!sphere_contains(&s, Vec3::new(1.4, 0.0, 0.0)));

        let inside = Vec3::new(0.5, 0.0, 0.5);
        assert_eq!(sphere_closest_point(&s, inside), inside);

        let unit = ReachabilitySphere::new(Vec3::ZERO, 1.0);
        assert_eq!(
            sphere_closest_point(&unit, Vec3::new(2.0, 0.0, 0.0)),
            Vec3::new(1.0, 0.0, 0.0)
        );
        let p = sphere_closest_point(&unit, Vec3::new(0.0, 3.0, 4.0));
        assert!((p - Vec3::new(0.0, 0.6, 0.8)).norm() < 1e-12);
    }

    #[test]
    fn aabb_examples() {
        let unit = Aabb::new(Vec3::ZERO, Vec3::new(0.5, 0.5, 0.5));
        assert!(aabb_contains(&unit, Vec3::ZERO));
        assert!(aabb_contains(&unit, Vec3::new(0.5, 0.5, 0.5)));
        assert!(!aabb_contains(&unit, Vec3::new(0.5, 0.5, 0.51)));
    }

    #[test]
    fn base_pose_round_trip() {
        let pose = BasePose {
            position: Vec3::new(0.3, -0.2, 0.7),
            yaw: 0.8,
        };
        let p = Vec3::new(1.0, 2.0, 3.0);
        assert!((pose.to_world(pose.to_base(p)) - p).norm() < 1e-12);
        assert_eq!(BasePose::identity().to_base(p), p);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn vec3(r: f64) -> impl Strategy<Value = Vec3> {
            (-r..r, -r..r, -r..r).prop_map(|(x, y, z)| Vec3::new(x, y, z))
        }

        proptest! {
            #[test]
            fn projection_lands_inside(c in vec3(2.0), r in 0.01f64..3.0, p in vec3(10.0)) {
                let s = ReachabilitySphere::new(c, r);
                let q = s.closest_point(p);
                prop_assert!(s.contains(q));
                let q2 = s.closest_point(q);
                prop_assert!((q2 - q).norm() <= 1e-9);
                if s.contains(p) {
                    prop_assert_eq!(q, p);
                }
            }

            #[test]
            fn top_center_on_boundary(c in vec3(2.0), e in (0.0f64..1.0, 0.0f64..1.0, 0.001f64..1.0)) {
                let obj = SceneObject::new("o", ObjectRole::Obstacle, c, Vec3::new(e.0, e.1, e.2));
                let top = obj.top_center();
                prop_assert!(obj.bounds.contains(top));
                prop_assert_eq!(top.z, obj.bounds.max().z);
            }

            #[test]
            fn serialization_round_trips(
                boxes in proptest::collection::vec((vec3(2.0), (0.01f64..1.0, 0.01f64..1.0, 0.01f64..1.0), 0usize..3), 0..6),
                r in 0.1f64..3.0,
                yaw in -3.0f64..3.0,
            ) {
                let roles = [ObjectRole::Obstacle, ObjectRole::TargetSurface, ObjectRole::Marker];
                let mut objects = vec![SceneObject::new("Robot", ObjectRole::Robot, Vec3::ZERO, Vec3::new(0.1, 0.1, 0.1))];
                for (i, (c, e, role)) in boxes.into_iter().enumerate() {
                    objects.push(SceneObject::new(format!("Obj_{i}"), roles[role], c, Vec3::new(e.0, e.1, e.2)));
                }
                let scene = Scene::new(
                    objects,
                    ReachabilitySphere::new(Vec3::ZERO, r),
                    BasePose { position: Vec3::new(0.1, 0.2, 0.3), yaw },
                ).unwrap();
                let back = load_scene(&scene.to_json()).unwrap();
                prop_assert!(back.warnings.is_empty());
                prop_assert_eq!(back.scene, scene);
            }
        }
    }
}

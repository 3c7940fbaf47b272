//! Position-only kinematics for a six-joint serial arm.
//!
//! Forward kinematics composes standard Denavit-Hartenberg transforms
//! (`Rz(theta) * Tz(d) * Tx(a) * Rx(alpha)`). Inverse kinematics is plain
//! gradient descent on the squared position error with forward-difference
//! gradients, clamping to joint limits after every step. Singular
//! configurations are not detected.

use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{BasePose, Vec3};

pub const JOINT_COUNT: usize = 6;

/// Canonical joint names, base first.
pub const JOINT_NAMES: [&str; JOINT_COUNT] =
    ["base", "shoulder", "elbow", "wrist-1", "wrist-2", "wrist-3"];

/// Joint angles in radians, ordered base, shoulder, elbow, wrist 1..3.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JointConfig(pub [f64; JOINT_COUNT]);

impl JointConfig {
    pub const HOME: JointConfig = JointConfig([0.0; JOINT_COUNT]);

    pub fn new(q: [f64; JOINT_COUNT]) -> Self {
        Self(q)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn as_array(&self) -> &[f64; JOINT_COUNT] {
        &self.0
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.0.iter()
    }
}

impl Index<usize> for JointConfig {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for JointConfig {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointDescriptor {
    pub name: String,
    pub dh_a: f64,
    pub dh_d: f64,
    pub dh_alpha: f64,
    pub limit_lo: f64,
    pub limit_hi: f64,
}

impl JointDescriptor {
    fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.limit_lo, self.limit_hi)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChainError {
    #[error("chain file syntax error at line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("a chain needs exactly {JOINT_COUNT} joints, got {0}")]
    JointCount(usize),
    #[error("joint `{0}` has limit_lo >= limit_hi")]
    BadLimits(String),
    #[error("joint `{0}` has a non-finite parameter")]
    NonFinite(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct KinematicChain {
    joints: [JointDescriptor; JOINT_COUNT],
    pub base_pose: BasePose,
}

impl KinematicChain {
    pub fn new(joints: Vec<JointDescriptor>, base_pose: BasePose) -> Result<Self, ChainError> {
        let joints: [JointDescriptor; JOINT_COUNT] = joints
            .try_into()
            .map_err(|v: Vec<JointDescriptor>| ChainError::JointCount(v.len()))?;
        for j in &joints {
            let params = [j.dh_a, j.dh_d, j.dh_alpha, j.limit_lo, j.limit_hi];
            if params.iter().any(|v| !v.is_finite()) {
                return Err(ChainError::NonFinite(j.name.clone()));
            }
            if j.limit_lo >= j.limit_hi {
                return Err(ChainError::BadLimits(j.name.clone()));
            }
        }
        Ok(Self { joints, base_pose })
    }

    /// UR10e-like arm carrying a 0.15 m gripper (folded into the last link
    /// offset), with +/-2pi limits on every joint.
    pub fn ur10e_like() -> Self {
        let dh = [
            (0.0, 0.1807, FRAC_PI_2),
            (-0.6127, 0.0, 0.0),
            (-0.57155, 0.0, 0.0),
            (0.0, 0.17415, FRAC_PI_2),
            (0.0, 0.11985, -FRAC_PI_2),
            (0.0, 0.26655, 0.0),
        ];
        let joints = JOINT_NAMES
            .iter()
            .zip(dh)
            .map(|(name, (a, d, alpha))| JointDescriptor {
                name: (*name).to_string(),
                dh_a: a,
                dh_d: d,
                dh_alpha: alpha,
                limit_lo: -TAU,
                limit_hi: TAU,
            })
            .collect();
        Self::new(joints, BasePose::identity()).expect("fixture chain is valid")
    }

    /// Parses a chain file: a JSON array of six joint descriptors.
    pub fn from_json(source: &str, base_pose: BasePose) -> Result<Self, ChainError> {
        let joints: Vec<JointDescriptor> =
            serde_json::from_str(source).map_err(|e| ChainError::Syntax {
                line: e.line(),
                message: e.to_string(),
            })?;
        Self::new(joints, base_pose)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.joints.to_vec()).expect("chain serializes")
    }

    pub fn with_base_pose(mut self, base_pose: BasePose) -> Self {
        self.base_pose = base_pose;
        self
    }

    pub fn joints(&self) -> &[JointDescriptor; JOINT_COUNT] {
        &self.joints
    }

    /// Upper bound on `|fk(q)|` from the triangle inequality over link offsets.
    pub fn max_extension(&self) -> f64 {
        self.joints.iter().map(|j| j.dh_a.hypot(j.dh_d)).sum()
    }

    /// A uniform draw inside the joint limits given six samples in `[0, 1)`.
    pub fn lerp_limits(&self, unit: [f64; JOINT_COUNT]) -> JointConfig {
        let mut q = [0.0; JOINT_COUNT];
        for (i, j) in self.joints.iter().enumerate() {
            q[i] = j.limit_lo + unit[i] * (j.limit_hi - j.limit_lo);
        }
        JointConfig(q)
    }

    pub fn within_limits(&self, q: &JointConfig) -> bool {
        self.joints
            .iter()
            .zip(q.iter())
            .all(|(j, v)| j.limit_lo <= *v && *v <= j.limit_hi)
    }
}

/// End-effector position in the robot base frame.
pub fn fk(chain: &KinematicChain, q: &JointConfig) -> Vec3 {
    // Running rotation (row-major 3x3) and translation of the composed transform.
    let mut r = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let mut t = [0.0; 3];
    for (j, &theta) in chain.joints.iter().zip(q.iter()) {
        let (st, ct) = theta.sin_cos();
        let (sa, ca) = j.dh_alpha.sin_cos();
        let local_t = [j.dh_a * ct, j.dh_a * st, j.dh_d];
        let local_r = [
            [ct, -st * ca, st * sa],
            [st, ct * ca, -ct * sa],
            [0.0, sa, ca],
        ];
        for row in 0..3 {
            t[row] += r[row][0] * local_t[0] + r[row][1] * local_t[1] + r[row][2] * local_t[2];
        }
        let mut next = [[0.0; 3]; 3];
        for row in 0..3 {
            for col in 0..3 {
                next[row][col] = r[row][0] * local_r[0][col]
                    + r[row][1] * local_r[1][col]
                    + r[row][2] * local_r[2][col];
            }
        }
        r = next;
    }
    Vec3::new(t[0], t[1], t[2])
}

/// End-effector position in the world frame.
pub fn fk_world(chain: &KinematicChain, q: &JointConfig) -> Vec3 {
    chain.base_pose.to_world(fk(chain, q))
}

pub fn clamp_to_limits(chain: &KinematicChain, q: &JointConfig) -> JointConfig {
    let mut out = *q;
    for (v, j) in out.0.iter_mut().zip(chain.joints.iter()) {
        *v = j.clamp(*v);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IkConfig {
    /// Position tolerance in meters.
    pub tol_m: f64,
    pub max_iters: usize,
    /// Forward-difference step, radians.
    pub fd_step: f64,
    /// Initial step length along the negative gradient.
    pub learning_rate: f64,
}

impl Default for IkConfig {
    fn default() -> Self {
        Self {
            tol_m: 1e-3,
            max_iters: 2000,
            fd_step: 1e-5,
            learning_rate: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IkSolution {
    pub q: JointConfig,
    /// Final distance to the target, meters.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IkError {
    #[error("target is {distance:.3} m from the base, beyond the chain's {max_extension:.3} m extension")]
    Unreachable {
        distance: f64,
        max_extension: f64,
        best_effort: IkSolution,
    },
    #[error("inverse kinematics diverged to a non-finite value")]
    NonFinite,
}

fn sq_error(chain: &KinematicChain, q: &JointConfig, target: Vec3) -> f64 {
    (fk(chain, q) - target).norm_squared()
}

/// Forward-difference gradient of `|fk(q) - target|^2`.
pub fn error_gradient(
    chain: &KinematicChain,
    q: &JointConfig,
    target: Vec3,
    step: f64,
) -> [f64; JOINT_COUNT] {
    let e0 = sq_error(chain, q, target);
    let mut grad = [0.0; JOINT_COUNT];
    for (i, g) in grad.iter_mut().enumerate() {
        let mut probe = *q;
        probe[i] += step;
        *g = (sq_error(chain, &probe, target) - e0) / step;
    }
    grad
}

/// Gradient descent on the squared position error. `target` is in the base frame.
pub fn ik(
    chain: &KinematicChain,
    target: Vec3,
    seed: &JointConfig,
    cfg: &IkConfig,
) -> Result<IkSolution, IkError> {
    if !target.is_finite() || !seed.is_finite() {
        return Err(IkError::NonFinite);
    }
    let mut q = clamp_to_limits(chain, seed);
    let mut err = sq_error(chain, &q, target);
    let tol_sq = cfg.tol_m * cfg.tol_m;

    let distance = target.norm();
    let max_extension = chain.max_extension();
    if distance > max_extension {
        let best_effort = IkSolution {
            q,
            residual: err.sqrt(),
            iterations: 0,
            converged: false,
        };
        return Err(IkError::Unreachable {
            distance,
            max_extension,
            best_effort,
        });
    }

    let mut rate = cfg.learning_rate;
    let mut iterations = 0;
    while err > tol_sq && iterations < cfg.max_iters {
        iterations += 1;
        let grad = error_gradient(chain, &q, target, cfg.fd_step);
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(IkError::NonFinite);
        }
        // Backtrack by halving until the error drops; a step that cannot
        // improve at all means we are stuck on a limit or a stationary point.
        let mut accepted = false;
        let mut step = rate;
        for _ in 0..40 {
            let mut candidate = q;
            for (v, g) in candidate.0.iter_mut().zip(grad.iter()) {
                *v -= step * g;
            }
            let candidate = clamp_to_limits(chain, &candidate);
            let cand_err = sq_error(chain, &candidate, target);
            if cand_err < err {
                q = candidate;
                err = cand_err;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        // Keep the last successful step length, allowing it to grow back
        // toward the configured rate.
        rate = (step * 2.0).min(cfg.learning_rate);
    }
    if !err.is_finite() {
        return Err(IkError::NonFinite);
    }
    Ok(IkSolution {
        q,
        residual: err.sqrt(),
        iterations,
        converged: err <= tol_sq,
    })
}

/// HOME with the base joint turned so the flange points at the target's azimuth.
pub fn aligned_seed(chain: &KinematicChain, target: Vec3) -> JointConfig {
    let home = fk(chain, &JointConfig::HOME);
    let mut q = JointConfig::HOME;
    if target.x != 0.0 || target.y != 0.0 {
        q[0] = wrap_angle(target.y.atan2(target.x) - home.y.atan2(home.x));
    }
    clamp_to_limits(chain, &q)
}

/// [`ik`] from `seed`, retried once from [`aligned_seed`] if that does not converge.
pub fn ik_with_fallback(
    chain: &KinematicChain,
    target: Vec3,
    seed: &JointConfig,
    cfg: &IkConfig,
) -> Result<IkSolution, IkError> {
    let first = ik(chain, target, seed, cfg)?;
    if first.converged {
        return Ok(first);
    }
    let second = ik(chain, target, &aligned_seed(chain, target), cfg)?;
    Ok(if second.residual < first.residual {
        second
    } else {
        first
    })
}

/// True iff [`ik_with_fallback`] converges from `seed`.
pub fn reachable(chain: &KinematicChain, target: Vec3, seed: &JointConfig, cfg: &IkConfig) -> bool {
    matches!(ik_with_fallback(chain, target, seed, cfg), Ok(sol) if sol.converged)
}

/// Normalizes an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(TAU) - PI;
    if w == -PI {
        PI
    } else {
        w
    }
}

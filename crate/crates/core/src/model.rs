//! Kinematic chain model: joints, limits, collision spheres, forward
//! kinematics and Jacobians.
//!
//! Chain convention: joint `i` moves in its parent link's frame (axis given in
//! the parent frame, rotation/translation about the parent frame origin),
//! followed by the fixed `origin` transform down to link `i`'s own frame:
//!
//! ```text
//! T_parent->link_i(q_i) = Motion(axis_i, q_i) ∘ origin_i
//! ```
//!
//! so link `i`'s frame sits at the far end of the link it carries. A planar 2R
//! arm with unit links is two revolute joints whose origins both translate by
//! (1, 0, 0).

use std::collections::BTreeSet;

use nalgebra::{DVector, Matrix3xX, Matrix6xX, UnitQuaternion, UnitVector3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Pose;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("failed to parse robot description: {0}")]
    Parse(#[from] serde_yaml::Error),
    #[error("invalid robot description: {0}")]
    Validation(String),
    #[error("expected {expected} joint values, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JointKind {
    Revolute,
    Prismatic,
}

/// Position bounds plus rate limits (velocity/acceleration/jerk), in rad or m
/// units depending on the joint kind.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct JointLimits {
    pub lower: f64,
    pub upper: f64,
    pub max_velocity: f64,
    pub max_acceleration: f64,
    pub max_jerk: f64,
}

impl JointLimits {
    fn validate(&self, name: &str) -> Result<(), ModelError> {
        if self.lower > self.upper {
            return Err(ModelError::Validation(format!(
                "joint {name}: lower limit {} exceeds upper {}",
                self.lower, self.upper
            )));
        }
        if self.max_velocity <= 0.0 || self.max_acceleration <= 0.0 || self.max_jerk <= 0.0 {
            return Err(ModelError::Validation(format!(
                "joint {name}: rate limits must be strictly positive"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct JointSpec {
    pub name: String,
    pub kind: JointKind,
    /// Motion axis, unit vector in the parent link frame.
    pub axis: UnitVector3<f64>,
    /// Fixed transform from the joint's moving frame down to the child link.
    pub origin: Pose,
    pub limits: JointLimits,
}

impl JointSpec {
    /// Parent-to-child transform at joint value `q`.
    pub fn transform(&self, q: f64) -> Pose {
        let motion = match self.kind {
            JointKind::Revolute => Pose::new(
                Vector3::zeros(),
                UnitQuaternion::from_axis_angle(&self.axis, q),
            ),
            JointKind::Prismatic => Pose::from_translation(self.axis.into_inner() * q),
        };
        motion.compose(&self.origin)
    }
}

/// A sphere fixed in a link frame, approximating link geometry for distance
/// queries.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CollisionSphere {
    pub link_index: usize,
    pub center: [f64; 3],
    pub radius: f64,
}

impl CollisionSphere {
    pub fn center_vec(&self) -> Vector3<f64> {
        Vector3::new(self.center[0], self.center[1], self.center[2])
    }
}

/// Joint values for one configuration of a chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JointConfig(pub Vec<f64>);

impl JointConfig {
    pub fn zeros(dof: usize) -> Self {
        JointConfig(vec![0.0; dof])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_dvector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.0)
    }
}

impl From<Vec<f64>> for JointConfig {
    fn from(v: Vec<f64>) -> Self {
        JointConfig(v)
    }
}

impl From<&DVector<f64>> for JointConfig {
    fn from(v: &DVector<f64>) -> Self {
        JointConfig(v.as_slice().to_vec())
    }
}

/// Immutable description of a serial-chain robot. Shareable across threads;
/// all kinematics routines are pure functions of (model, config).
#[derive(Debug, Clone)]
pub struct RobotModel {
    pub name: String,
    pub joints: Vec<JointSpec>,
    pub spheres: Vec<CollisionSphere>,
    /// Symmetric set of link-index pairs excluded from self-collision checks.
    /// Adjacent links are always excluded.
    pub self_collision_ignore: BTreeSet<(usize, usize)>,
    pub end_effector_link: usize,
}

impl RobotModel {
    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    pub fn check_dof(&self, q: &JointConfig) -> Result<(), ModelError> {
        if q.len() != self.dof() {
            return Err(ModelError::DimensionMismatch {
                expected: self.dof(),
                got: q.len(),
            });
        }
        Ok(())
    }

    pub fn joint_names(&self) -> Vec<String> {
        self.joints.iter().map(|j| j.name.clone()).collect()
    }

    pub fn limits(&self) -> Vec<JointLimits> {
        self.joints.iter().map(|j| j.limits).collect()
    }

    /// Clamp a configuration into the position limits.
    pub fn clamp_config(&self, q: &mut [f64]) {
        for (v, j) in q.iter_mut().zip(&self.joints) {
            *v = v.clamp(j.limits.lower, j.limits.upper);
        }
    }

    pub fn within_limits(&self, q: &JointConfig, tol: f64) -> bool {
        q.0.iter()
            .zip(&self.joints)
            .all(|(v, j)| *v >= j.limits.lower - tol && *v <= j.limits.upper + tol)
    }

    pub fn ignores_pair(&self, a: usize, b: usize) -> bool {
        if a == b {
            return true;
        }
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        hi - lo == 1 || self.self_collision_ignore.contains(&(lo, hi))
    }

    /// Conservative bound on how far any point of the robot can sit from a
    /// joint's motion axis; used as a Lipschitz constant for swept checks.
    pub fn reach_bound(&self) -> f64 {
        let origins: f64 = self.joints.iter().map(|j| j.origin.position.norm()).sum();
        let prismatic: f64 = self
            .joints
            .iter()
            .filter(|j| j.kind == JointKind::Prismatic)
            .map(|j| j.limits.lower.abs().max(j.limits.upper.abs()))
            .sum();
        let sphere_offset = self
            .spheres
            .iter()
            .map(|s| s.center_vec().norm() + s.radius)
            .fold(0.0, f64::max);
        origins + prismatic + sphere_offset
    }
}

/// Per-link world poses for one configuration. The end-effector pose is the
/// entry at `end_effector_link` (the last link for ordinary chains).
pub fn forward_kinematics(robot: &RobotModel, q: &JointConfig) -> Result<Vec<Pose>, ModelError> {
    robot.check_dof(q)?;
    let mut poses = Vec::with_capacity(robot.dof());
    let mut current = Pose::identity();
    for (joint, &value) in robot.joints.iter().zip(&q.0) {
        current = current.compose(&joint.transform(value));
        poses.push(current);
    }
    Ok(poses)
}

pub fn end_effector_pose(robot: &RobotModel, q: &JointConfig) -> Result<Pose, ModelError> {
    let poses = forward_kinematics(robot, q)?;
    Ok(poses[robot.end_effector_link])
}

/// World axis and anchor point of each joint, given the link poses. Joint 0
/// moves in the world frame.
fn joint_frames(robot: &RobotModel, link_poses: &[Pose]) -> Vec<(Vector3<f64>, Vector3<f64>)> {
    robot
        .joints
        .iter()
        .enumerate()
        .map(|(i, joint)| {
            let parent = if i == 0 {
                Pose::identity()
            } else {
                link_poses[i - 1]
            };
            (
                parent.orientation * joint.axis.into_inner(),
                parent.position,
            )
        })
        .collect()
}

/// Geometric Jacobian at the end-effector origin: rows 0..3 linear (world
/// x,y,z), rows 3..6 angular.
pub fn jacobian(robot: &RobotModel, q: &JointConfig) -> Result<Matrix6xX<f64>, ModelError> {
    let poses = forward_kinematics(robot, q)?;
    Ok(jacobian_from_poses(robot, &poses))
}

pub fn jacobian_from_poses(robot: &RobotModel, link_poses: &[Pose]) -> Matrix6xX<f64> {
    let ee = link_poses[robot.end_effector_link].position;
    let frames = joint_frames(robot, link_poses);
    let mut jac = Matrix6xX::zeros(robot.dof());
    for (j, (joint, (axis, anchor))) in robot.joints.iter().zip(frames).enumerate() {
        if j > robot.end_effector_link {
            continue;
        }
        match joint.kind {
            JointKind::Revolute => {
                let linear = axis.cross(&(ee - anchor));
                jac.fixed_view_mut::<3, 1>(0, j).copy_from(&linear);
                jac.fixed_view_mut::<3, 1>(3, j).copy_from(&axis);
            }
            JointKind::Prismatic => {
                jac.fixed_view_mut::<3, 1>(0, j).copy_from(&axis);
            }
        }
    }
    jac
}

/// Positional Jacobian of a point rigidly attached to `link` at world
/// position `point`.
pub fn point_jacobian(
    robot: &RobotModel,
    link_poses: &[Pose],
    link: usize,
    point: &Vector3<f64>,
) -> Matrix3xX<f64> {
    let frames = joint_frames(robot, link_poses);
    let mut jac = Matrix3xX::zeros(robot.dof());
    for (j, (joint, (axis, anchor))) in robot.joints.iter().zip(frames).enumerate() {
        if j > link {
            break;
        }
        let column = match joint.kind {
            JointKind::Revolute => axis.cross(&(point - anchor)),
            JointKind::Prismatic => axis,
        };
        jac.set_column(j, &column);
    }
    jac
}

/// Prepend a prismatic gantry axis to an existing robot, shifting all link
/// references by one. The gantry and the original base link are marked as an
/// adjacent pair for self-collision purposes (which they are, post-shift).
pub fn compose_gantry_chain(
    base: &RobotModel,
    gantry: JointSpec,
    gantry_spheres: Vec<CollisionSphere>,
) -> Result<RobotModel, ModelError> {
    if gantry.kind != JointKind::Prismatic {
        return Err(ModelError::Validation(format!(
            "gantry joint {} must be prismatic",
            gantry.name
        )));
    }
    gantry.limits.validate(&gantry.name)?;
    let mut joints = Vec::with_capacity(base.dof() + 1);
    joints.push(gantry);
    joints.extend(base.joints.iter().cloned());

    let mut spheres: Vec<CollisionSphere> = gantry_spheres
        .into_iter()
        .map(|s| {
            if s.link_index != 0 {
                Err(ModelError::Validation(format!(
                    "gantry sphere references link {}, expected 0",
                    s.link_index
                )))
            } else if s.radius <= 0.0 {
                Err(ModelError::Validation(
                    "gantry sphere radius must be positive".into(),
                ))
            } else {
                Ok(s)
            }
        })
        .collect::<Result<_, _>>()?;
    spheres.extend(base.spheres.iter().map(|s| CollisionSphere {
        link_index: s.link_index + 1,
        ..*s
    }));

    let self_collision_ignore = base
        .self_collision_ignore
        .iter()
        .map(|&(a, b)| (a + 1, b + 1))
        .collect();

    Ok(RobotModel {
        name: format!("{}+{}", base.name, joints[0].name),
        joints,
        spheres,
        self_collision_ignore,
        end_effector_link: base.end_effector_link + 1,
    })
}

// ---------------------------------------------------------------------------
// YAML schema

#[derive(Debug, Deserialize)]
struct RobotFile {
    robot: RobotDoc,
}

#[derive(Debug, Deserialize)]
struct RobotDoc {
    name: String,
    end_effector_link: usize,
    joints: Vec<JointDoc>,
    #[serde(default)]
    collision_spheres: Vec<SphereDoc>,
    #[serde(default)]
    self_collision_ignore: Vec<(usize, usize)>,
}

#[derive(Debug, Deserialize)]
struct JointDoc {
    name: String,
    kind: JointKind,
    axis: [f64; 3],
    #[serde(default = "Pose::identity")]
    origin: Pose,
    limits: JointLimits,
}

#[derive(Debug, Deserialize)]
struct SphereDoc {
    link: usize,
    center: [f64; 3],
    radius: f64,
}

/// Parse and validate a robot description document.
pub fn load_robot_model(text: &str) -> Result<RobotModel, ModelError> {
    let file: RobotFile = serde_yaml::from_str(text)?;
    let doc = file.robot;
    if doc.joints.is_empty() {
        return Err(ModelError::Validation("robot has no joints".into()));
    }
    let dof = doc.joints.len();
    if doc.end_effector_link >= dof {
        return Err(ModelError::Validation(format!(
            "end_effector_link {} out of range for {dof} links",
            doc.end_effector_link
        )));
    }

    let mut joints = Vec::with_capacity(dof);
    for j in doc.joints {
        let axis = Vector3::new(j.axis[0], j.axis[1], j.axis[2]);
        if (axis.norm() - 1.0).abs() > 1e-9 {
            return Err(ModelError::Validation(format!(
                "joint {}: axis norm {} is not within 1e-9 of 1",
                j.name,
                axis.norm()
            )));
        }
        j.limits.validate(&j.name)?;
        joints.push(JointSpec {
            name: j.name,
            kind: j.kind,
            axis: UnitVector3::new_normalize(axis),
            origin: j.origin,
            limits: j.limits,
        });
    }

    let mut spheres = Vec::with_capacity(doc.collision_spheres.len());
    for s in doc.collision_spheres {
        if s.link >= dof {
            return Err(ModelError::Validation(format!(
                "collision sphere references link {} of a {dof}-link chain",
                s.link
            )));
        }
        if s.radius <= 0.0 {
            return Err(ModelError::Validation(format!(
                "collision sphere on link {} has non-positive radius",
                s.link
            )));
        }
        spheres.push(CollisionSphere {
            link_index: s.link,
            center: s.center,
            radius: s.radius,
        });
    }

    let mut ignore = BTreeSet::new();
    for (a, b) in doc.self_collision_ignore {
        if a >= dof || b >= dof {
            return Err(ModelError::Validation(format!(
                "self_collision_ignore pair ({a},{b}) out of range"
            )));
        }
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        ignore.insert((lo, hi));
    }

    Ok(RobotModel {
        name: doc.name,
        joints,
        spheres,
        self_collision_ignore: ignore,
        end_effector_link: doc.end_effector_link,
    })
}

#[cfg(test)]
pub(crate) mod testkit {
    //! Deterministic random model generators shared by the unit tests.

    use super::*;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    pub fn limits() -> &'static str {
        "{lower: -6.3, upper: 6.3, max_velocity: 3.0, max_acceleration: 10.0, max_jerk: 100.0}"
    }

    pub fn planar_2r() -> RobotModel {
        let text = format!(
            r#"
robot:
  name: planar2r
  end_effector_link: 1
  joints:
    - {{name: shoulder, kind: revolute, axis: [0, 0, 1],
        origin: {{xyz: [1, 0, 0]}}, limits: {limits}}}
    - {{name: elbow, kind: revolute, axis: [0, 0, 1],
        origin: {{xyz: [1, 0, 0]}}, limits: {limits}}}
"#,
            limits = limits()
        );
        load_robot_model(&text).unwrap()
    }

    pub fn random_chain(rng: &mut ChaCha8Rng, dof: usize) -> RobotModel {
        let mut joints = Vec::new();
        for i in 0..dof {
            let kind = if rng.random_bool(0.25) {
                JointKind::Prismatic
            } else {
                JointKind::Revolute
            };
            let axis = loop {
                let v = Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                );
                if v.norm() > 0.3 {
                    break UnitVector3::new_normalize(v);
                }
            };
            let origin = Pose::new(
                Vector3::new(
                    rng.random_range(-0.2..0.2),
                    rng.random_range(-0.2..0.2),
                    rng.random_range(0.05..0.3),
                ),
                UnitQuaternion::from_euler_angles(
                    rng.random_range(-0.4..0.4),
                    rng.random_range(-0.4..0.4),
                    rng.random_range(-0.4..0.4),
                ),
            );
            joints.push(JointSpec {
                name: format!("j{i}"),
                kind,
                axis,
                origin,
                limits: JointLimits {
                    lower: if kind == JointKind::Prismatic { -0.5 } else { -3.0 },
                    upper: if kind == JointKind::Prismatic { 0.5 } else { 3.0 },
                    max_velocity: 2.0,
                    max_acceleration: 8.0,
                    max_jerk: 80.0,
                },
            });
        }
        RobotModel {
            name: "random".into(),
            joints,
            spheres: Vec::new(),
            self_collision_ignore: BTreeSet::new(),
            end_effector_link: dof - 1,
        }
    }

    pub fn random_config(robot: &RobotModel, rng: &mut ChaCha8Rng) -> JointConfig {
        JointConfig(
            robot
                .joints
                .iter()
                .map(|j| rng.random_range(j.limits.lower..j.limits.upper))
                .collect(),
        )
    }
}

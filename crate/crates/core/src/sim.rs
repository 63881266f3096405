//! Kinematic execution environment: steps the robot toward commands under
//! velocity clamping, advances scripted obstacle motion, and models grasping
//! as rigid attach/detach.

use std::sync::Arc;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Pose;
use crate::model::{end_effector_pose, JointConfig, ModelError, RobotModel};
use crate::world::{WorldError, WorldScene};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("unknown obstacle id: {0}")]
    UnknownId(String),
    #[error("script window [{0}, {1}] is invalid")]
    BadWindow(f64, f64),
    #[error("obstacle {0} already has a script overlapping [{1}, {2}]")]
    OverlappingScript(String, f64, f64),
    #[error("attach failed: end effector is {0:.4} m from the grasp pose")]
    AttachTooFar(f64),
}

/// Constant-velocity translation of one obstacle over a time window.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MotionScript {
    pub obstacle_id: String,
    pub velocity: [f64; 3],
    pub t_start: f64,
    pub t_end: f64,
}

#[derive(Debug, Clone)]
struct Attachment {
    obstacle_id: String,
    /// Object pose in the end-effector frame, captured at attach time.
    grasp: Pose,
}

/// Distance under which `try_attach` succeeds.
pub const ATTACH_TOLERANCE: f64 = 0.01;

pub struct Simulation {
    robot: Arc<RobotModel>,
    time: f64,
    config: JointConfig,
    scene: WorldScene,
    attached: Option<Attachment>,
    scripts: Vec<MotionScript>,
}

impl Simulation {
    pub fn new(robot: Arc<RobotModel>, scene: WorldScene, start: JointConfig) -> Result<Self, SimError> {
        robot.check_dof(&start)?;
        Ok(Simulation {
            robot,
            time: 0.0,
            config: start,
            scene,
            attached: None,
            scripts: Vec::new(),
        })
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn config(&self) -> &JointConfig {
        &self.config
    }

    pub fn scene(&self) -> &WorldScene {
        &self.scene
    }

    pub fn robot(&self) -> &Arc<RobotModel> {
        &self.robot
    }

    pub fn attached_object(&self) -> Option<&str> {
        self.attached.as_ref().map(|a| a.obstacle_id.as_str())
    }

    pub fn script_obstacle_motion(
        &mut self,
        id: &str,
        velocity: Vector3<f64>,
        t_start: f64,
        t_end: f64,
    ) -> Result<(), SimError> {
        if self.scene.get(id).is_none() {
            return Err(SimError::UnknownId(id.to_string()));
        }
        if !(t_start < t_end) {
            return Err(SimError::BadWindow(t_start, t_end));
        }
        let overlapping = self
            .scripts
            .iter()
            .any(|s| s.obstacle_id == id && s.t_start < t_end && t_start < s.t_end);
        if overlapping {
            return Err(SimError::OverlappingScript(id.to_string(), t_start, t_end));
        }
        self.scripts.push(MotionScript {
            obstacle_id: id.to_string(),
            velocity: [velocity.x, velocity.y, velocity.z],
            t_start,
            t_end,
        });
        Ok(())
    }

    /// Advance one timestep toward `command`: per-joint motion is clamped at
    /// `max_velocity · dt`, scripted obstacles integrate their windows
    /// exactly, and an attached object rides the end effector.
    pub fn step(&mut self, command: &JointConfig, dt: f64) -> Result<(), SimError> {
        assert!(dt > 0.0);
        self.robot.check_dof(command)?;

        for (j, joint) in self.robot.joints.iter().enumerate() {
            let max_step = joint.limits.max_velocity * dt;
            let delta = (command.0[j] - self.config.0[j]).clamp(-max_step, max_step);
            self.config.0[j] = (self.config.0[j] + delta)
                .clamp(joint.limits.lower, joint.limits.upper);
        }

        let window = (self.time, self.time + dt);
        let moves: Vec<(String, Vector3<f64>)> = self
            .scripts
            .iter()
            .filter_map(|s| {
                let overlap = (s.t_end.min(window.1) - s.t_start.max(window.0)).max(0.0);
                if overlap > 0.0 {
                    let v = Vector3::new(s.velocity[0], s.velocity[1], s.velocity[2]);
                    Some((s.obstacle_id.clone(), v * overlap))
                } else {
                    None
                }
            })
            .collect();
        for (id, displacement) in moves {
            if displacement.norm() == 0.0 {
                continue;
            }
            let pose = self
                .scene
                .get(&id)
                .ok_or_else(|| SimError::UnknownId(id.clone()))?
                .pose;
            self.scene.update_obstacle_pose(
                &id,
                Pose::new(pose.position + displacement, pose.orientation),
            )?;
        }

        if let Some(attachment) = &self.attached {
            let ee = end_effector_pose(&self.robot, &self.config)?;
            let new_pose = ee.compose(&attachment.grasp);
            let current = self
                .scene
                .get(&attachment.obstacle_id)
                .ok_or_else(|| SimError::UnknownId(attachment.obstacle_id.clone()))?
                .pose;
            if (new_pose.position - current.position).norm() > 0.0
                || new_pose.orientation.angle_to(&current.orientation) > 0.0
            {
                let id = attachment.obstacle_id.clone();
                self.scene.update_obstacle_pose(&id, new_pose)?;
            }
        }

        self.time += dt;
        Ok(())
    }

    /// Grasp an object: succeeds when the end effector is within
    /// [`ATTACH_TOLERANCE`] of the declared grasp pose, capturing the current
    /// relative transform.
    pub fn try_attach(&mut self, id: &str, declared_grasp: &Pose) -> Result<(), SimError> {
        let object_pose = self
            .scene
            .get(id)
            .ok_or_else(|| SimError::UnknownId(id.to_string()))?
            .pose;
        let ee = end_effector_pose(&self.robot, &self.config)?;
        let gap = (ee.position - declared_grasp.position).norm();
        if gap > ATTACH_TOLERANCE {
            return Err(SimError::AttachTooFar(gap));
        }
        self.attached = Some(Attachment {
            obstacle_id: id.to_string(),
            grasp: ee.inverse().compose(&object_pose),
        });
        Ok(())
    }

    pub fn detach(&mut self) {
        self.attached = None;
    }
}

// ---------------------------------------------------------------------------
// Episode script document

/// YAML episode description: robot and scene files plus obstacle motion
/// scripts and the goal the controller should chase.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeDoc {
    pub robot: String,
    pub scene: String,
    #[serde(default)]
    pub start: Option<Vec<f64>>,
    pub goal: Pose,
    #[serde(default)]
    pub scripts: Vec<MotionScript>,
    #[serde(default = "default_duration")]
    pub duration: f64,
}

fn default_duration() -> f64 {
    6.0
}

pub fn load_episode(text: &str) -> Result<EpisodeDoc, serde_yaml::Error> {
    serde_yaml::from_str(text)
}

//! Versioned obstacle scenes with primitive signed-distance queries.
//!
//! A scene is a value: mutations bump its version, and a `clone()` taken
//! before a mutation is an immutable snapshot planners can safely query from
//! any thread while a single writer advances the live scene.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Pose;
use crate::model::CollisionSphere;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("failed to parse scene description: {0}")]
    Parse(#[from] serde_yaml::Error),
    #[error("invalid scene description: {0}")]
    Validation(String),
    #[error("obstacle id already present: {0}")]
    DuplicateId(String),
    #[error("unknown obstacle id: {0}")]
    UnknownId(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Cuboid { half_extents: Vector3<f64> },
    Sphere { radius: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Obstacle {
    pub id: String,
    pub shape: Shape,
    pub pose: Pose,
}

impl Obstacle {
    pub fn cuboid(id: &str, half_extents: Vector3<f64>, pose: Pose) -> Self {
        Obstacle {
            id: id.into(),
            shape: Shape::Cuboid { half_extents },
            pose,
        }
    }

    pub fn sphere(id: &str, radius: f64, pose: Pose) -> Self {
        Obstacle {
            id: id.into(),
            shape: Shape::Sphere { radius },
            pose,
        }
    }

    fn validate(&self) -> Result<(), WorldError> {
        let ok = match self.shape {
            Shape::Cuboid { half_extents } => half_extents.min() > 0.0,
            Shape::Sphere { radius } => radius > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(WorldError::Validation(format!(
                "obstacle {}: extents must be strictly positive",
                self.id
            )))
        }
    }

    /// Signed distance from a point to this obstacle's surface; negative
    /// inside. Cuboids are exact outside (clamp to the box) and use the
    /// minimum axis margin inside, a lower bound on true penetration depth.
    pub fn signed_distance(&self, point: &Vector3<f64>) -> f64 {
        match self.shape {
            Shape::Sphere { radius } => (point - self.pose.position).norm() - radius,
            Shape::Cuboid { half_extents } => {
                let local = self.pose.inverse().transform_point(point);
                let excess = Vector3::new(
                    local.x.abs() - half_extents.x,
                    local.y.abs() - half_extents.y,
                    local.z.abs() - half_extents.z,
                );
                if excess.x <= 0.0 && excess.y <= 0.0 && excess.z <= 0.0 {
                    excess.max()
                } else {
                    Vector3::new(excess.x.max(0.0), excess.y.max(0.0), excess.z.max(0.0)).norm()
                }
            }
        }
    }

    /// Unit direction (world frame) in which the signed distance grows
    /// fastest at `point`; used by collision-cost gradients.
    pub fn distance_gradient(&self, point: &Vector3<f64>) -> Vector3<f64> {
        match self.shape {
            Shape::Sphere { .. } => {
                let d = point - self.pose.position;
                let n = d.norm();
                if n < 1e-12 {
                    Vector3::z()
                } else {
                    d / n
                }
            }
            Shape::Cuboid { half_extents } => {
                let local = self.pose.inverse().transform_point(point);
                let excess = Vector3::new(
                    local.x.abs() - half_extents.x,
                    local.y.abs() - half_extents.y,
                    local.z.abs() - half_extents.z,
                );
                let local_grad = if excess.x <= 0.0 && excess.y <= 0.0 && excess.z <= 0.0 {
                    // Inside: push out through the nearest face.
                    let mut axis = 0;
                    if excess.y > excess[axis] {
                        axis = 1;
                    }
                    if excess.z > excess[axis] {
                        axis = 2;
                    }
                    let mut g = Vector3::zeros();
                    g[axis] = if local[axis] >= 0.0 { 1.0 } else { -1.0 };
                    g
                } else {
                    let outside = Vector3::new(
                        excess.x.max(0.0) * local.x.signum(),
                        excess.y.max(0.0) * local.y.signum(),
                        excess.z.max(0.0) * local.z.signum(),
                    );
                    let n = outside.norm();
                    if n < 1e-12 {
                        Vector3::z()
                    } else {
                        outside / n
                    }
                };
                self.pose.orientation * local_grad
            }
        }
    }
}

/// Ordered obstacle set with a version that strictly increases on every
/// mutation.
#[derive(Debug, Clone, Default)]
pub struct WorldScene {
    obstacles: Vec<Obstacle>,
    version: u64,
}

impl WorldScene {
    pub fn new() -> Self {
        WorldScene::default()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn obstacles(&self) -> &[Obstacle] {
        &self.obstacles
    }

    pub fn is_empty(&self) -> bool {
        self.obstacles.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Obstacle> {
        self.obstacles.iter().find(|o| o.id == id)
    }

    pub fn add_obstacle(&mut self, obstacle: Obstacle) -> Result<u64, WorldError> {
        obstacle.validate()?;
        if self.get(&obstacle.id).is_some() {
            return Err(WorldError::DuplicateId(obstacle.id));
        }
        self.obstacles.push(obstacle);
        self.version += 1;
        Ok(self.version)
    }

    pub fn update_obstacle_pose(&mut self, id: &str, pose: Pose) -> Result<u64, WorldError> {
        let obstacle = self
            .obstacles
            .iter_mut()
            .find(|o| o.id == id)
            .ok_or_else(|| WorldError::UnknownId(id.to_string()))?;
        obstacle.pose = pose;
        self.version += 1;
        Ok(self.version)
    }

    pub fn remove_obstacle(&mut self, id: &str) -> Result<u64, WorldError> {
        let idx = self
            .obstacles
            .iter()
            .position(|o| o.id == id)
            .ok_or_else(|| WorldError::UnknownId(id.to_string()))?;
        self.obstacles.remove(idx);
        self.version += 1;
        Ok(self.version)
    }

    /// Snapshot with one obstacle filtered out (e.g. an object the gripper is
    /// carrying, which must not count as a world collision).
    pub fn without(&self, id: &str) -> WorldScene {
        WorldScene {
            obstacles: self
                .obstacles
                .iter()
                .filter(|o| o.id != id)
                .cloned()
                .collect(),
            version: self.version + 1,
        }
    }

    /// Minimum signed clearance between a sphere and all obstacles, with the
    /// id of the nearest one. Empty scenes return `+∞` and no id.
    pub fn signed_distance_sphere(
        &self,
        center: &Vector3<f64>,
        radius: f64,
    ) -> (f64, Option<&str>) {
        let mut best = f64::INFINITY;
        let mut best_id = None;
        for obstacle in &self.obstacles {
            let clearance = obstacle.signed_distance(center) - radius;
            if clearance < best {
                best = clearance;
                best_id = Some(obstacle.id.as_str());
            }
        }
        (best, best_id)
    }
}

/// Uniformly place spheres along a segment so that the capsule of the given
/// radius around it is fully covered. Centers are spaced at most
/// `max_spacing` apart; the returned radius absorbs the sag between
/// neighboring centers (`sqrt(r² + (s/2)²)`), so a zero-length segment gets
/// back exactly the requested radius.
pub fn pack_link_spheres(
    segment_start: &Vector3<f64>,
    segment_end: &Vector3<f64>,
    radius: f64,
    max_spacing: f64,
    link_index: usize,
) -> Vec<CollisionSphere> {
    assert!(radius > 0.0 && max_spacing > 0.0);
    let length = (segment_end - segment_start).norm();
    if length == 0.0 {
        return vec![CollisionSphere {
            link_index,
            center: [segment_start.x, segment_start.y, segment_start.z],
            radius,
        }];
    }
    let count = (length / max_spacing).ceil() as usize + 1;
    let spacing = length / (count - 1) as f64;
    let packed_radius = (radius * radius + (spacing / 2.0) * (spacing / 2.0)).sqrt();
    (0..count)
        .map(|i| {
            let t = i as f64 / (count - 1) as f64;
            let c = segment_start + (segment_end - segment_start) * t;
            CollisionSphere {
                link_index,
                center: [c.x, c.y, c.z],
                radius: packed_radius,
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// YAML schema

#[derive(Debug, Serialize, Deserialize)]
struct SceneFile {
    #[serde(default)]
    obstacles: Vec<ObstacleDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ObstacleDoc {
    id: String,
    shape: ShapeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    half_extents: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    radius: Option<f64>,
    #[serde(default = "Pose::identity")]
    pose: Pose,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum ShapeKind {
    Cuboid,
    Sphere,
}

/// Parse a scene document into a fresh scene (version = obstacle count, one
/// bump per insert).
pub fn load_scene(text: &str) -> Result<WorldScene, WorldError> {
    let file: SceneFile = serde_yaml::from_str(text)?;
    let mut scene = WorldScene::new();
    for doc in file.obstacles {
        let shape = match doc.shape {
            ShapeKind::Cuboid => {
                let he = doc.half_extents.ok_or_else(|| {
                    WorldError::Validation(format!("obstacle {}: cuboid needs half_extents", doc.id))
                })?;
                Shape::Cuboid {
                    half_extents: Vector3::new(he[0], he[1], he[2]),
                }
            }
            ShapeKind::Sphere => {
                let radius = doc.radius.ok_or_else(|| {
                    WorldError::Validation(format!("obstacle {}: sphere needs radius", doc.id))
                })?;
                Shape::Sphere { radius }
            }
        };
        scene.add_obstacle(Obstacle {
            id: doc.id,
            shape,
            pose: doc.pose,
        })?;
    }
    Ok(scene)
}

/// Serialize a scene back into its document form.
pub fn scene_to_yaml(scene: &WorldScene) -> String {
    let docs = scene
        .obstacles()
        .iter()
        .map(|o| match o.shape {
            Shape::Cuboid { half_extents } => ObstacleDoc {
                id: o.id.clone(),
                shape: ShapeKind::Cuboid,
                half_extents: Some([half_extents.x, half_extents.y, half_extents.z]),
                radius: None,
                pose: o.pose,
            },
            Shape::Sphere { radius } => ObstacleDoc {
                id: o.id.clone(),
                shape: ShapeKind::Sphere,
                half_extents: None,
                radius: Some(radius),
                pose: o.pose,
            },
        })
        .collect();
    serde_yaml::to_string(&SceneFile { obstacles: docs }).expect("scene serialization")
}

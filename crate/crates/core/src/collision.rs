//! Robot-vs-world and self-collision clearance queries, plus swept trajectory
//! checking.
//!
//! The sweep walks the trajectory knots, then subdivides each knot interval
//! with a conservative clearance-rate bound: intervals whose endpoint
//! clearances cannot dip below the margin are pruned, the rest are bisected
//! down to `tol_s`. Any violation wider than `tol_s` is therefore found; once
//! an unsafe instant is known, the earliest crossing is bracketed between the
//! last safe and first unsafe samples by binary search until the bracket is
//! narrower than `tol_s`.

use nalgebra::Vector3;

use crate::costs::Trajectory;
use crate::model::{forward_kinematics, JointConfig, JointKind, ModelError, RobotModel};
use crate::world::WorldScene;

/// Clearance summary for one configuration. `+∞` means "nothing to check"
/// (empty scene, or no live self-collision pairs).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ClearanceReport {
    #[serde(with = "crate::wire::float")]
    pub min_world_clearance: f64,
    #[serde(with = "crate::wire::float")]
    pub min_self_clearance: f64,
    pub worst_sphere: Option<usize>,
    pub worst_obstacle: Option<String>,
}

impl ClearanceReport {
    pub fn min(&self) -> f64 {
        self.min_world_clearance.min(self.min_self_clearance)
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SweepReport {
    pub collision_free: bool,
    /// Bracket around the earliest margin crossing, when one exists:
    /// clearance ≥ margin at `t_lo`, < margin at `t_hi`, `t_hi − t_lo ≤ tol_s`.
    pub first_contact_interval: Option<(f64, f64)>,
    #[serde(with = "crate::wire::float")]
    pub min_clearance: f64,
}

/// World sphere centers for one configuration.
pub fn sphere_centers(robot: &RobotModel, q: &JointConfig) -> Result<Vec<Vector3<f64>>, ModelError> {
    let poses = forward_kinematics(robot, q)?;
    Ok(robot
        .spheres
        .iter()
        .map(|s| poses[s.link_index].transform_point(&s.center_vec()))
        .collect())
}

/// Minimum clearance over all (sphere, obstacle) pairs and all non-ignored
/// self pairs on distinct links.
pub fn robot_clearance(
    robot: &RobotModel,
    scene: &WorldScene,
    q: &JointConfig,
) -> Result<ClearanceReport, ModelError> {
    let centers = sphere_centers(robot, q)?;

    let mut min_world = f64::INFINITY;
    let mut worst_sphere = None;
    let mut worst_obstacle = None;
    for (i, (sphere, center)) in robot.spheres.iter().zip(&centers).enumerate() {
        let (clearance, id) = scene.signed_distance_sphere(center, sphere.radius);
        if clearance < min_world {
            min_world = clearance;
            worst_sphere = Some(i);
            worst_obstacle = id.map(str::to_string);
        }
    }

    let mut min_self = f64::INFINITY;
    for i in 0..robot.spheres.len() {
        for j in (i + 1)..robot.spheres.len() {
            let (a, b) = (&robot.spheres[i], &robot.spheres[j]);
            if robot.ignores_pair(a.link_index, b.link_index) {
                continue;
            }
            // Radii summed first so the value is exactly symmetric in (i, j).
            let clearance = (centers[i] - centers[j]).norm() - (a.radius + b.radius);
            if clearance < min_self {
                min_self = clearance;
                if clearance < min_world {
                    worst_sphere = Some(i);
                }
            }
        }
    }

    Ok(ClearanceReport {
        min_world_clearance: min_world,
        min_self_clearance: min_self,
        worst_sphere,
        worst_obstacle,
    })
}

/// Joint values at time `t` along a linearly interpolated trajectory.
pub fn interpolate(traj: &Trajectory, t: f64) -> JointConfig {
    let duration = traj.duration();
    let t = t.clamp(0.0, duration);
    let s = t / traj.dt;
    let k = (s.floor() as usize).min(traj.len() - 2);
    let frac = s - k as f64;
    let a = &traj.knots[k];
    let b = &traj.knots[k + 1];
    JointConfig(
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x + (y - x) * frac)
            .collect(),
    )
}

struct SweepScan<'a> {
    robot: &'a RobotModel,
    scene: &'a WorldScene,
    traj: &'a Trajectory,
    margin: f64,
    tol: f64,
    reach: f64,
    min_clearance: f64,
}

impl SweepScan<'_> {
    fn clearance(&mut self, t: f64) -> f64 {
        let q = interpolate(self.traj, t);
        let c = robot_clearance(self.robot, self.scene, &q)
            .expect("interpolated config has trajectory dimension")
            .min();
        self.min_clearance = self.min_clearance.min(c);
        c
    }

    /// Upper bound on |d clearance / dt| while moving linearly from the
    /// config at `a` to the config at `b`. Sphere centers move no faster than
    /// Σ|q̇_j|·c_j with c_j the joint's lever-arm bound; self distances see
    /// two moving centers, hence the factor 2.
    fn rate_bound(&self, a: f64, b: f64) -> f64 {
        let qa = interpolate(self.traj, a);
        let qb = interpolate(self.traj, b);
        let dt = b - a;
        let mut speed = 0.0;
        for (j, joint) in self.robot.joints.iter().enumerate() {
            let coeff = match joint.kind {
                JointKind::Revolute => self.reach,
                JointKind::Prismatic => 1.0,
            };
            speed += (qb.0[j] - qa.0[j]).abs() / dt * coeff;
        }
        2.0 * speed
    }

    /// Earliest time with clearance < margin inside `[a, b]`, where both
    /// endpoints are known safe. Returns the unsafe sample, not yet bracketed.
    fn find_dip(&mut self, a: f64, ca: f64, b: f64, cb: f64) -> Option<f64> {
        if b - a <= self.tol {
            return None; // possible dips narrower than tol_s are accepted
        }
        let worst = 0.5 * (ca + cb) - 0.5 * self.rate_bound(a, b) * (b - a);
        if worst >= self.margin {
            return None; // certified: no dip in this interval
        }
        let m = 0.5 * (a + b);
        let cm = self.clearance(m);
        if cm < self.margin {
            // Something even earlier may hide in the left half.
            return Some(self.find_dip(a, ca, m, cm).unwrap_or(m));
        }
        self.find_dip(a, ca, m, cm)
            .or_else(|| self.find_dip(m, cm, b, cb))
    }

    /// Shrink `[lo, hi]` (safe, unsafe) to width ≤ tol_s around the earliest
    /// crossing.
    fn bracket(&mut self, mut lo: f64, mut hi: f64) -> (f64, f64) {
        while hi - lo > self.tol {
            let m = 0.5 * (lo + hi);
            if self.clearance(m) < self.margin {
                hi = m;
            } else {
                lo = m;
            }
        }
        (lo, hi)
    }
}

/// Swept collision check over a linearly interpolated trajectory.
pub fn sweep_check(
    robot: &RobotModel,
    scene: &WorldScene,
    traj: &Trajectory,
    safety_margin: f64,
    tol_s: f64,
) -> SweepReport {
    assert!(!traj.knots.is_empty() && tol_s > 0.0);
    let mut scan = SweepScan {
        robot,
        scene,
        traj,
        margin: safety_margin,
        tol: tol_s,
        reach: robot.reach_bound(),
        min_clearance: f64::INFINITY,
    };

    let first = scan.clearance(0.0);
    if first < safety_margin {
        return SweepReport {
            collision_free: false,
            first_contact_interval: Some((0.0, tol_s)),
            min_clearance: scan.min_clearance,
        };
    }

    let mut prev_t = 0.0;
    let mut prev_c = first;
    for k in 1..traj.len() {
        let t = k as f64 * traj.dt;
        let c = scan.clearance(t);
        if c < safety_margin {
            // Knot unsafe: the earliest crossing is either a dip strictly
            // inside the interval or the approach to this knot.
            let dip = scan.find_dip(prev_t, prev_c, t, c);
            let hi = dip.unwrap_or(t);
            let (lo, hi) = scan.bracket(prev_t, hi);
            return SweepReport {
                collision_free: false,
                first_contact_interval: Some((lo, hi)),
                min_clearance: scan.min_clearance,
            };
        }
        if let Some(dip) = scan.find_dip(prev_t, prev_c, t, c) {
            let (lo, hi) = scan.bracket(prev_t, dip);
            return SweepReport {
                collision_free: false,
                first_contact_interval: Some((lo, hi)),
                min_clearance: scan.min_clearance,
            };
        }
        prev_t = t;
        prev_c = c;
    }

    SweepReport {
        collision_free: true,
        first_contact_interval: None,
        min_clearance: scan.min_clearance,
    }
}

/// Grid oracle: clearance ≥ margin at every knot and at `oversample`
/// uniformly spaced points per knot interval. `oversample = 1` degenerates to
/// per-knot checking.
pub fn dense_validate(
    robot: &RobotModel,
    scene: &WorldScene,
    traj: &Trajectory,
    margin: f64,
    oversample: usize,
) -> bool {
    assert!(oversample >= 1);
    let check = |q: &JointConfig| {
        robot_clearance(robot, scene, q)
            .expect("trajectory dimension matches robot")
            .min()
            >= margin
    };
    for k in 0..traj.len() - 1 {
        for i in 0..oversample {
            let t = (k as f64 + i as f64 / oversample as f64) * traj.dt;
            if !check(&interpolate(traj, t)) {
                return false;
            }
        }
    }
    check(&JointConfig(traj.knots.last().unwrap().clone()))
}

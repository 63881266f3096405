//! Differentiable cost terms of the trajectory optimization problem and
//! their analytic gradients.
//!
//! Derivative convention: backward finite differences,
//! `v_t = (Θ_t − Θ_{t−1})/dt` and so on for acceleration and jerk, summed
//! over the indices where they are defined. Orientation errors are world-frame
//! rotation vectors; their gradients go through the inverse right Jacobian of
//! SO(3), which is exact (no small-angle approximation).

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::geometry::{right_jacobian_inv, rotation_vector, Pose};
use crate::model::{
    forward_kinematics, jacobian_from_poses, point_jacobian, JointConfig, JointLimits, ModelError,
    RobotModel,
};
use crate::world::WorldScene;

/// Uniformly time-stepped joint-value sequence; the optimization variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub dt: f64,
    pub knots: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.knots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.knots.is_empty()
    }

    pub fn dof(&self) -> usize {
        self.knots.first().map_or(0, Vec::len)
    }

    pub fn duration(&self) -> f64 {
        (self.len().saturating_sub(1)) as f64 * self.dt
    }

    pub fn start(&self) -> JointConfig {
        JointConfig(self.knots[0].clone())
    }

    pub fn end(&self) -> JointConfig {
        JointConfig(self.knots.last().expect("nonempty trajectory").clone())
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.len() < 2 {
            return Err(ModelError::Validation("trajectory needs at least 2 knots".into()));
        }
        if !(self.dt > 0.0) {
            return Err(ModelError::Validation("trajectory dt must be positive".into()));
        }
        let dof = self.dof();
        for knot in &self.knots {
            if knot.len() != dof {
                return Err(ModelError::Validation("ragged trajectory knots".into()));
            }
            if knot.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::Validation("non-finite trajectory value".into()));
            }
        }
        Ok(())
    }

    /// Straight-line interpolation between two configurations.
    pub fn linear(from: &JointConfig, to: &JointConfig, t_knots: usize, dt: f64) -> Trajectory {
        let knots = (0..t_knots)
            .map(|k| {
                let s = if t_knots > 1 {
                    k as f64 / (t_knots - 1) as f64
                } else {
                    0.0
                };
                // Convex form keeps the endpoints exact.
                from.0
                    .iter()
                    .zip(&to.0)
                    .map(|(a, b)| a * (1.0 - s) + b * s)
                    .collect()
            })
            .collect();
        Trajectory { dt, knots }
    }
}

/// All tunable weights of the planner objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostWeights {
    pub w_pos: f64,
    pub w_rot: f64,
    pub w_v: f64,
    pub w_a: f64,
    pub w_j: f64,
    pub w_coll: f64,
    pub activation_margin: f64,
    pub w_limit: f64,
    pub w_hold: f64,
    /// Per-axis hold weights: rotational x,y,z then linear x,y,z.
    pub hold_vec_weight: [f64; 6],
}

impl Default for CostWeights {
    fn default() -> Self {
        CostWeights {
            w_pos: 15_000.0,
            w_rot: 1_800.0,
            w_v: 1.0,
            w_a: 1.0,
            w_j: 1.0,
            w_coll: 5_000.0,
            activation_margin: 0.05,
            w_limit: 1_000.0,
            w_hold: 2_000.0,
            hold_vec_weight: [1.0, 1.0, 1.0, 0.0, 0.0, 0.0],
        }
    }
}

impl CostWeights {
    pub fn from_yaml(text: &str) -> Result<Self, serde_yaml::Error> {
        serde_yaml::from_str(text)
    }
}

/// Cost value with its gradient, shaped like the trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct CostEval {
    pub value: f64,
    pub gradient: Vec<Vec<f64>>,
}

impl CostEval {
    pub fn zeros(t_knots: usize, dof: usize) -> Self {
        CostEval {
            value: 0.0,
            gradient: vec![vec![0.0; dof]; t_knots],
        }
    }

    pub fn accumulate(&mut self, other: &CostEval) {
        self.value += other.value;
        for (row, orow) in self.gradient.iter_mut().zip(&other.gradient) {
            for (g, o) in row.iter_mut().zip(orow) {
                *g += o;
            }
        }
    }

    pub fn grad_inf_norm(&self) -> f64 {
        self.gradient
            .iter()
            .flatten()
            .fold(0.0, |m, g| m.max(g.abs()))
    }
}

fn quat_conj_rotvec(target: &Pose, actual: &Pose) -> Vector3<f64> {
    rotation_vector(&(target.orientation * actual.orientation.inverse()))
}

/// Terminal goal-reaching cost: `w_pos·‖p_g − p(Θ_T)‖² + w_rot·θ_err²` with
/// θ_err the rotation-vector norm of the terminal orientation error. The
/// gradient touches only the last knot.
pub fn goal_cost(
    robot: &RobotModel,
    traj: &Trajectory,
    goal: &Pose,
    w: &CostWeights,
) -> Result<CostEval, ModelError> {
    let mut eval = CostEval::zeros(traj.len(), traj.dof());
    let last = traj.len() - 1;
    let q = JointConfig(traj.knots[last].clone());
    let poses = forward_kinematics(robot, &q)?;
    let ee = poses[robot.end_effector_link];
    let jac = jacobian_from_poses(robot, &poses);

    let e_pos = goal.position - ee.position;
    let phi = quat_conj_rotvec(goal, &ee);
    eval.value = w.w_pos * e_pos.norm_squared() + w.w_rot * phi.norm_squared();

    // d‖p_g − p‖²/dq = −2 J_linᵀ e_pos; for the isotropic rotation term the
    // right-Jacobian factor collapses (φᵀ Jr⁻¹ = φᵀ), leaving −2 J_angᵀ φ.
    for j in 0..robot.dof() {
        let lin = Vector3::new(jac[(0, j)], jac[(1, j)], jac[(2, j)]);
        let ang = Vector3::new(jac[(3, j)], jac[(4, j)], jac[(5, j)]);
        eval.gradient[last][j] = -2.0 * w.w_pos * lin.dot(&e_pos) - 2.0 * w.w_rot * ang.dot(&phi);
    }
    Ok(eval)
}

/// Smoothness (velocity/acceleration/jerk squared norms) plus quadratic
/// hinges on position and rate limit violations.
pub fn smooth_cost(traj: &Trajectory, w: &CostWeights, limits: &[JointLimits]) -> CostEval {
    let t_knots = traj.len();
    let dof = traj.dof();
    assert_eq!(limits.len(), dof, "one JointLimits entry per joint");
    let mut eval = CostEval::zeros(t_knots, dof);
    let dt = traj.dt;
    let (inv_dt, inv_dt2, inv_dt3) = (1.0 / dt, 1.0 / (dt * dt), 1.0 / (dt * dt * dt));

    for j in 0..dof {
        let lim = &limits[j];
        // Hierarchical backward differences: v from knots, a from v, jerk
        // from a. Constant trajectories then cancel exactly.
        let mut vel = vec![0.0; t_knots];
        let mut acc = vec![0.0; t_knots];
        let mut jerk = vec![0.0; t_knots];
        for t in 1..t_knots {
            vel[t] = (traj.knots[t][j] - traj.knots[t - 1][j]) * inv_dt;
        }
        for t in 2..t_knots {
            acc[t] = (vel[t] - vel[t - 1]) * inv_dt;
        }
        for t in 3..t_knots {
            jerk[t] = (acc[t] - acc[t - 1]) * inv_dt;
        }

        for t in 0..t_knots {
            // Position bound hinges (both sides).
            let over = (traj.knots[t][j] - lim.upper).max(0.0);
            let under = (lim.lower - traj.knots[t][j]).max(0.0);
            if over > 0.0 {
                eval.value += w.w_limit * over * over;
                eval.gradient[t][j] += 2.0 * w.w_limit * over;
            }
            if under > 0.0 {
                eval.value += w.w_limit * under * under;
                eval.gradient[t][j] -= 2.0 * w.w_limit * under;
            }

            if t >= 1 {
                let v = vel[t];
                eval.value += w.w_v * v * v;
                let g = 2.0 * w.w_v * v * inv_dt;
                eval.gradient[t][j] += g;
                eval.gradient[t - 1][j] -= g;

                let hv = (v.abs() - lim.max_velocity).max(0.0);
                if hv > 0.0 {
                    eval.value += w.w_limit * hv * hv;
                    let g = 2.0 * w.w_limit * hv * v.signum() * inv_dt;
                    eval.gradient[t][j] += g;
                    eval.gradient[t - 1][j] -= g;
                }
            }
            if t >= 2 {
                let a = acc[t];
                eval.value += w.w_a * a * a;
                let g = 2.0 * w.w_a * a * inv_dt2;
                eval.gradient[t][j] += g;
                eval.gradient[t - 1][j] -= 2.0 * g;
                eval.gradient[t - 2][j] += g;

                let ha = (a.abs() - lim.max_acceleration).max(0.0);
                if ha > 0.0 {
                    eval.value += w.w_limit * ha * ha;
                    let g = 2.0 * w.w_limit * ha * a.signum() * inv_dt2;
                    eval.gradient[t][j] += g;
                    eval.gradient[t - 1][j] -= 2.0 * g;
                    eval.gradient[t - 2][j] += g;
                }
            }
            if t >= 3 {
                let jk = jerk[t];
                eval.value += w.w_j * jk * jk;
                let g = 2.0 * w.w_j * jk * inv_dt3;
                eval.gradient[t][j] += g;
                eval.gradient[t - 1][j] -= 3.0 * g;
                eval.gradient[t - 2][j] += 3.0 * g;
                eval.gradient[t - 3][j] -= g;

                let hj = (jk.abs() - lim.max_jerk).max(0.0);
                if hj > 0.0 {
                    eval.value += w.w_limit * hj * hj;
                    let g = 2.0 * w.w_limit * hj * jk.signum() * inv_dt3;
                    eval.gradient[t][j] += g;
                    eval.gradient[t - 1][j] -= 3.0 * g;
                    eval.gradient[t - 2][j] += 3.0 * g;
                    eval.gradient[t - 3][j] -= g;
                }
            }
        }
    }
    eval
}

/// Soft world-collision cost: squared hinge of `activation_margin − clearance`
/// per sphere per knot. The distance gradient follows the nearest primitive's
/// outward direction through the sphere-center Jacobian.
pub fn collision_cost(
    robot: &RobotModel,
    scene: &WorldScene,
    traj: &Trajectory,
    w: &CostWeights,
) -> Result<CostEval, ModelError> {
    let mut eval = CostEval::zeros(traj.len(), traj.dof());
    if w.w_coll == 0.0 || scene.is_empty() || robot.spheres.is_empty() {
        return Ok(eval);
    }
    for t in 0..traj.len() {
        let q = JointConfig(traj.knots[t].clone());
        let poses = forward_kinematics(robot, &q)?;
        for sphere in &robot.spheres {
            let center = poses[sphere.link_index].transform_point(&sphere.center_vec());
            let mut clearance = f64::INFINITY;
            let mut nearest = None;
            for obstacle in scene.obstacles() {
                let c = obstacle.signed_distance(&center) - sphere.radius;
                if c < clearance {
                    clearance = c;
                    nearest = Some(obstacle);
                }
            }
            let hinge = w.activation_margin - clearance;
            if hinge <= 0.0 {
                continue;
            }
            eval.value += w.w_coll * hinge * hinge;
            let direction = nearest.expect("nonempty scene").distance_gradient(&center);
            let jac = point_jacobian(robot, &poses, sphere.link_index, &center);
            for j in 0..robot.dof() {
                let dc = direction.dot(&jac.column(j));
                eval.gradient[t][j] -= 2.0 * w.w_coll * hinge * dc;
            }
        }
    }
    Ok(eval)
}

/// Soft self-collision cost over non-ignored sphere pairs on distinct links,
/// same hinge shape as the world term.
pub fn self_collision_cost(
    robot: &RobotModel,
    traj: &Trajectory,
    margin: f64,
    weight: f64,
) -> Result<CostEval, ModelError> {
    let mut eval = CostEval::zeros(traj.len(), traj.dof());
    if weight == 0.0 || robot.spheres.len() < 2 {
        return Ok(eval);
    }
    for t in 0..traj.len() {
        let q = JointConfig(traj.knots[t].clone());
        let poses = forward_kinematics(robot, &q)?;
        let centers: Vec<Vector3<f64>> = robot
            .spheres
            .iter()
            .map(|s| poses[s.link_index].transform_point(&s.center_vec()))
            .collect();
        for i in 0..robot.spheres.len() {
            for k in (i + 1)..robot.spheres.len() {
                let (a, b) = (&robot.spheres[i], &robot.spheres[k]);
                if robot.ignores_pair(a.link_index, b.link_index) {
                    continue;
                }
                let delta = centers[i] - centers[k];
                let dist = delta.norm();
                let clearance = dist - (a.radius + b.radius);
                let hinge = margin - clearance;
                if hinge <= 0.0 || dist < 1e-12 {
                    continue;
                }
                eval.value += weight * hinge * hinge;
                let u = delta / dist;
                let jac_i = point_jacobian(robot, &poses, a.link_index, &centers[i]);
                let jac_k = point_jacobian(robot, &poses, b.link_index, &centers[k]);
                for j in 0..robot.dof() {
                    let dc = u.dot(&jac_i.column(j)) - u.dot(&jac_k.column(j));
                    eval.gradient[t][j] -= 2.0 * weight * hinge * dc;
                }
            }
        }
    }
    Ok(eval)
}

/// Pose-hold cost across all knots: per-axis weighted squared rotation-vector
/// error against a reference orientation (rotational axes), plus analogous
/// position-error terms for the linear axes.
pub fn hold_orientation_cost(
    robot: &RobotModel,
    traj: &Trajectory,
    reference: &Pose,
    w: &CostWeights,
) -> Result<CostEval, ModelError> {
    let mut eval = CostEval::zeros(traj.len(), traj.dof());
    let hvw = &w.hold_vec_weight;
    if w.w_hold == 0.0 || hvw.iter().all(|&x| x == 0.0) {
        return Ok(eval);
    }
    let rot_w = Vector3::new(hvw[0], hvw[1], hvw[2]);
    let lin_w = Vector3::new(hvw[3], hvw[4], hvw[5]);
    for t in 0..traj.len() {
        let q = JointConfig(traj.knots[t].clone());
        let poses = forward_kinematics(robot, &q)?;
        let ee = poses[robot.end_effector_link];
        let jac = jacobian_from_poses(robot, &poses);

        let phi = quat_conj_rotvec(reference, &ee);
        let weighted_phi = phi.component_mul(&rot_w);
        let e_pos = reference.position - ee.position;
        let weighted_pos = e_pos.component_mul(&lin_w);
        eval.value += w.w_hold * (weighted_phi.dot(&phi) + weighted_pos.dot(&e_pos));

        // Anisotropic axis weights keep the Jr⁻¹ factor: δφ = −Jr⁻¹(φ)·J_ang δq.
        let jr_inv_t: Matrix3<f64> = right_jacobian_inv(&phi).transpose();
        let rot_pull = jr_inv_t * weighted_phi;
        for j in 0..robot.dof() {
            let lin = Vector3::new(jac[(0, j)], jac[(1, j)], jac[(2, j)]);
            let ang = Vector3::new(jac[(3, j)], jac[(4, j)], jac[(5, j)]);
            eval.gradient[t][j] +=
                -2.0 * w.w_hold * (ang.dot(&rot_pull) + lin.dot(&weighted_pos));
        }
    }
    Ok(eval)
}

#[cfg(test)]
pub(crate) mod fd {
    //! Central finite-difference gradient harness shared by the cost tests.

    use super::*;

    pub fn gradient<F: FnMut(&Trajectory) -> f64>(traj: &Trajectory, mut f: F) -> Vec<Vec<f64>> {
        let h = 1e-6;
        let mut grad = vec![vec![0.0; traj.dof()]; traj.len()];
        for t in 0..traj.len() {
            for j in 0..traj.dof() {
                let mut plus = traj.clone();
                let mut minus = traj.clone();
                plus.knots[t][j] += h;
                minus.knots[t][j] -= h;
                grad[t][j] = (f(&plus) - f(&minus)) / (2.0 * h);
            }
        }
        grad
    }

    /// ‖fd − analytic‖∞ scaled by max(1, ‖analytic‖∞).
    pub fn relative_error(analytic: &[Vec<f64>], numeric: &[Vec<f64>]) -> f64 {
        let mut diff: f64 = 0.0;
        let mut scale: f64 = 1.0;
        for (ra, rn) in analytic.iter().zip(numeric) {
            for (a, n) in ra.iter().zip(rn) {
                diff = diff.max((a - n).abs());
                scale = scale.max(a.abs());
            }
        }
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::testkit::{random_chain, random_config};
    use crate::model::{end_effector_pose, CollisionSphere};
    use crate::world::Obstacle;
    use approx::assert_relative_eq;
    use nalgebra::UnitQuaternion;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn loose_limits(dof: usize) -> Vec<JointLimits> {
        vec![
            JointLimits {
                lower: -10.0,
                upper: 10.0,
                max_velocity: 100.0,
                max_acceleration: 1e4,
                max_jerk: 1e6,
            };
            dof
        ]
    }

    fn random_traj(rng: &mut ChaCha8Rng, t_knots: usize, dof: usize) -> Trajectory {
        Trajectory {
            dt: 0.1,
            knots: (0..t_knots)
                .map(|_| (0..dof).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect(),
        }
    }

    #[test]
    fn goal_cost_zero_at_goal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let robot = random_chain(&mut rng, 4);
        let q = random_config(&robot, &mut rng);
        let goal = end_effector_pose(&robot, &q).unwrap();
        let traj = Trajectory::linear(&q, &q, 5, 0.1);
        let eval = goal_cost(&robot, &traj, &goal, &CostWeights::default()).unwrap();
        assert_relative_eq!(eval.value, 0.0, epsilon = 1e-18);
        assert_relative_eq!(eval.grad_inf_norm(), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn goal_cost_analytic_square() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let robot = random_chain(&mut rng, 3);
        let q = random_config(&robot, &mut rng);
        let mut goal = end_effector_pose(&robot, &q).unwrap();
        goal.position += Vector3::new(0.1, 0.0, 0.0);
        let traj = Trajectory::linear(&q, &q, 4, 0.1);
        let w = CostWeights {
            w_pos: 1.0,
            w_rot: 0.0,
            ..CostWeights::default()
        };
        let eval = goal_cost(&robot, &traj, &goal, &w).unwrap();
        assert_relative_eq!(eval.value, 0.01, epsilon = 1e-12);
    }

    #[test]
    fn goal_gradient_confined_to_last_knot() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let robot = random_chain(&mut rng, 5);
        let traj = random_traj(&mut rng, 6, 5);
        let goal = end_effector_pose(&robot, &random_config(&robot, &mut rng)).unwrap();
        let eval = goal_cost(&robot, &traj, &goal, &CostWeights::default()).unwrap();
        for t in 0..traj.len() - 1 {
            assert!(eval.gradient[t].iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn goal_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let robot = random_chain(&mut rng, 6);
            let traj = random_traj(&mut rng, 5, 6);
            let goal = end_effector_pose(&robot, &random_config(&robot, &mut rng)).unwrap();
            let w = CostWeights::default();
            let eval = goal_cost(&robot, &traj, &goal, &w).unwrap();
            let numeric = fd::gradient(&traj, |t| goal_cost(&robot, t, &goal, &w).unwrap().value);
            assert!(fd::relative_error(&eval.gradient, &numeric) < 1e-5);
        }
    }

    #[test]
    fn smooth_cost_zero_for_constant() {
        let traj = Trajectory {
            dt: 0.05,
            knots: vec![vec![0.3, -0.2]; 6],
        };
        let eval = smooth_cost(&traj, &CostWeights::default(), &loose_limits(2));
        assert_eq!(eval.value, 0.0);
    }

    #[test]
    fn smooth_cost_backward_difference_convention() {
        // Ramp (0,1,2) at dt=1 with only w_v: two unit velocities → 2.
        let traj = Trajectory {
            dt: 1.0,
            knots: vec![vec![0.0], vec![1.0], vec![2.0]],
        };
        let w = CostWeights {
            w_v: 1.0,
            w_a: 0.0,
            w_j: 0.0,
            w_limit: 0.0,
            ..CostWeights::default()
        };
        let eval = smooth_cost(&traj, &w, &loose_limits(1));
        assert_relative_eq!(eval.value, 2.0, epsilon = 1e-15);
    }

    #[test]
    fn smooth_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..20 {
            let dof = 2 + trial % 3;
            let traj = random_traj(&mut rng, 6, dof);
            // Tight limits so the hinge terms are exercised too.
            let limits = vec![
                JointLimits {
                    lower: -0.8,
                    upper: 0.8,
                    max_velocity: 3.0,
                    max_acceleration: 40.0,
                    max_jerk: 900.0,
                };
                dof
            ];
            let w = CostWeights::default();
            let eval = smooth_cost(&traj, &w, &limits);
            let numeric = fd::gradient(&traj, |t| smooth_cost(t, &w, &limits).value);
            assert!(fd::relative_error(&eval.gradient, &numeric) < 1e-5);
        }
    }

    fn sphered_chain(rng: &mut ChaCha8Rng, dof: usize) -> RobotModel {
        let mut robot = random_chain(rng, dof);
        for link in 0..dof {
            robot.spheres.push(CollisionSphere {
                link_index: link,
                center: [0.02, -0.03, 0.05],
                radius: 0.04,
            });
        }
        robot
    }

    #[test]
    fn collision_cost_inactive_when_clear() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let robot = sphered_chain(&mut rng, 3);
        let mut scene = WorldScene::new();
        scene
            .add_obstacle(Obstacle::cuboid(
                "far",
                Vector3::new(0.2, 0.2, 0.2),
                Pose::from_translation(Vector3::new(50.0, 0.0, 0.0)),
            ))
            .unwrap();
        let traj = random_traj(&mut rng, 5, 3);
        let eval = collision_cost(&robot, &scene, &traj, &CostWeights::default()).unwrap();
        assert_eq!(eval.value, 0.0);
        assert_eq!(eval.grad_inf_norm(), 0.0);
    }

    #[test]
    fn collision_hinge_zero_at_exact_margin() {
        // A static sphere robot at clearance exactly equal to the margin.
        let robot = crate::model::load_robot_model(
            r#"
robot:
  name: probe
  end_effector_link: 0
  joints:
    - {name: x, kind: prismatic, axis: [1, 0, 0],
       limits: {lower: -5, upper: 5, max_velocity: 5, max_acceleration: 50, max_jerk: 500}}
  collision_spheres:
    - {link: 0, center: [0, 0, 0], radius: 0.1}
"#,
        )
        .unwrap();
        let mut scene = WorldScene::new();
        scene
            .add_obstacle(Obstacle::sphere(
                "ball",
                0.2,
                Pose::from_translation(Vector3::new(1.0, 0.0, 0.0)),
            ))
            .unwrap();
        let w = CostWeights::default();
        // Clearance(x) = (1 − x) − 0.2 − 0.1; equals margin at x = 0.65.
        let x = 1.0 - 0.2 - 0.1 - w.activation_margin;
        let traj = Trajectory {
            dt: 0.1,
            knots: vec![vec![x], vec![x]],
        };
        let eval = collision_cost(&robot, &scene, &traj, &w).unwrap();
        assert_relative_eq!(eval.value, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn collision_gradient_matches_fd_near_cuboid() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut checked = 0;
        while checked < 15 {
            let dof = 2 + rng.random_range(0..2usize);
            let robot = sphered_chain(&mut rng, dof);
            let mut scene = WorldScene::new();
            scene
                .add_obstacle(Obstacle::cuboid(
                    "box",
                    Vector3::new(0.3, 0.3, 0.3),
                    Pose::new(
                        Vector3::new(0.3, 0.1, 0.2),
                        UnitQuaternion::from_euler_angles(0.2, -0.3, 0.5),
                    ),
                ))
                .unwrap();
            let traj = random_traj(&mut rng, 4, robot.dof());
            let w = CostWeights::default();
            let eval = collision_cost(&robot, &scene, &traj, &w).unwrap();
            if eval.value == 0.0 {
                continue; // want at least one active hinge
            }
            // Skip instances with a sphere inside the box (interior distance
            // has kinks by design).
            let penetrating = traj.knots.iter().any(|k| {
                let q = JointConfig(k.clone());
                crate::collision::robot_clearance(&robot, &scene, &q)
                    .unwrap()
                    .min_world_clearance
                    <= 0.002
            });
            if penetrating {
                continue;
            }
            let numeric =
                fd::gradient(&traj, |t| collision_cost(&robot, &scene, t, &w).unwrap().value);
            assert!(fd::relative_error(&eval.gradient, &numeric) < 1e-4);
            checked += 1;
        }
    }

    #[test]
    fn self_collision_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut checked = 0;
        while checked < 10 {
            let mut robot = random_chain(&mut rng, 4);
            robot.spheres.push(CollisionSphere {
                link_index: 0,
                center: [0.0, 0.0, 0.0],
                radius: 0.15,
            });
            robot.spheres.push(CollisionSphere {
                link_index: 3,
                center: [0.0, 0.0, 0.0],
                radius: 0.15,
            });
            let traj = random_traj(&mut rng, 4, 4);
            let eval = self_collision_cost(&robot, &traj, 0.05, 100.0).unwrap();
            if eval.value == 0.0 {
                continue;
            }
            let numeric =
                fd::gradient(&traj, |t| self_collision_cost(&robot, t, 0.05, 100.0).unwrap().value);
            assert!(fd::relative_error(&eval.gradient, &numeric) < 1e-4);
            checked += 1;
        }
    }

    #[test]
    fn hold_cost_zero_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let robot = random_chain(&mut rng, 3);
        let q = random_config(&robot, &mut rng);
        let reference = end_effector_pose(&robot, &q).unwrap();
        let traj = Trajectory::linear(&q, &q, 5, 0.1);
        let w = CostWeights::default();
        let eval = hold_orientation_cost(&robot, &traj, &reference, &w).unwrap();
        assert_relative_eq!(eval.value, 0.0, epsilon = 1e-16);

        // Disabled hold vector zeroes the cost for any trajectory.
        let traj2 = random_traj(&mut rng, 5, 3);
        let w_off = CostWeights {
            hold_vec_weight: [0.0; 6],
            ..w
        };
        let eval2 = hold_orientation_cost(&robot, &traj2, &reference, &w_off).unwrap();
        assert_eq!(eval2.value, 0.0);
    }

    #[test]
    fn hold_cost_single_axis_square() {
        // One knot deviating by a 0.1 rad pure roll with unit weights → 0.01.
        let robot = crate::model::load_robot_model(
            r#"
robot:
  name: roller
  end_effector_link: 0
  joints:
    - {name: roll, kind: revolute, axis: [1, 0, 0],
       limits: {lower: -3.2, upper: 3.2, max_velocity: 3, max_acceleration: 10, max_jerk: 100}}
"#,
        )
        .unwrap();
        let reference = Pose::identity();
        let traj = Trajectory {
            dt: 0.1,
            knots: vec![vec![0.0], vec![0.1], vec![0.0]],
        };
        let w = CostWeights {
            w_hold: 1.0,
            hold_vec_weight: [1.0, 1.0, 1.0, 0.0, 0.0, 0.0],
            ..CostWeights::default()
        };
        let eval = hold_orientation_cost(&robot, &traj, &reference, &w).unwrap();
        assert_relative_eq!(eval.value, 0.01, epsilon = 1e-12);
    }

    #[test]
    fn hold_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..15 {
            let robot = random_chain(&mut rng, 5);
            let traj = random_traj(&mut rng, 5, 5);
            let reference = end_effector_pose(&robot, &random_config(&robot, &mut rng)).unwrap();
            // Anisotropic weights exercise the right-Jacobian path.
            let w = CostWeights {
                w_hold: 7.0,
                hold_vec_weight: [1.0, 0.3, 2.0, 0.5, 0.0, 1.5],
                ..CostWeights::default()
            };
            let eval = hold_orientation_cost(&robot, &traj, &reference, &w).unwrap();
            let numeric = fd::gradient(&traj, |t| {
                hold_orientation_cost(&robot, t, &reference, &w).unwrap().value
            });
            assert!(fd::relative_error(&eval.gradient, &numeric) < 1e-5);
        }
    }

    #[test]
    fn doubling_a_weight_doubles_its_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let robot = random_chain(&mut rng, 4);
        let traj = random_traj(&mut rng, 6, 4);
        let goal = end_effector_pose(&robot, &random_config(&robot, &mut rng)).unwrap();

        let w1 = CostWeights {
            w_pos: 100.0,
            w_rot: 0.0,
            ..CostWeights::default()
        };
        let w2 = CostWeights { w_pos: 200.0, ..w1 };
        let a = goal_cost(&robot, &traj, &goal, &w1).unwrap().value;
        let b = goal_cost(&robot, &traj, &goal, &w2).unwrap().value;
        assert_relative_eq!(2.0 * a, b, epsilon = 1e-12);

        let limits = loose_limits(4);
        let wv1 = CostWeights {
            w_v: 3.0,
            w_a: 0.0,
            w_j: 0.0,
            w_limit: 0.0,
            ..CostWeights::default()
        };
        let wv2 = CostWeights { w_v: 6.0, ..wv1 };
        let sa = smooth_cost(&traj, &wv1, &limits).value;
        let sb = smooth_cost(&traj, &wv2, &limits).value;
        assert_relative_eq!(2.0 * sa, sb, epsilon = 1e-12);
    }

    #[test]
    fn weights_yaml_defaults() {
        let w = CostWeights::from_yaml("w_pos: 20000\n").unwrap();
        assert_eq!(w.w_pos, 20_000.0);
        assert_eq!(w.w_rot, 1_800.0);
        assert_eq!(w.hold_vec_weight, [1.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
    }
}

//! Multi-seed collision-aware inverse kinematics.
//!
//! Each seed starts at a uniform random configuration and runs damped
//! least-squares descent on the pose residual, with a hinge push away from
//! obstacles whenever a collision sphere gets too close. Converged solutions
//! must satisfy the pose tolerances, sit at non-negative clearance, and
//! respect joint limits.

use nalgebra::{DVector, Matrix6, Vector6};
use rand::Rng;

use crate::collision::robot_clearance;
use crate::geometry::{rotation_vector, Pose};
use crate::model::{forward_kinematics, jacobian_from_poses, point_jacobian, JointConfig, RobotModel};
use crate::world::WorldScene;

use super::{derive_rng, SolverError};

#[derive(Debug, Clone, Copy)]
pub struct IkOptions {
    pub position_tol: f64,
    pub rotation_tol: f64,
    pub max_iters: usize,
    /// Damping of the least-squares step.
    pub damping: f64,
    /// Clearance below which the collision push activates.
    pub clearance_margin: f64,
}

impl Default for IkOptions {
    fn default() -> Self {
        IkOptions {
            position_tol: 1e-3,
            rotation_tol: 1e-2,
            max_iters: 120,
            damping: 0.05,
            clearance_margin: 0.02,
        }
    }
}

/// A converged IK solution with its ranking keys.
#[derive(Debug, Clone)]
pub struct IkSolution {
    pub config: JointConfig,
    pub position_error: f64,
    pub rotation_error: f64,
    pub clearance: f64,
}

impl IkSolution {
    fn residual(&self) -> f64 {
        self.position_error + self.rotation_error
    }
}

/// Gradient step that increases clearance when any sphere is within the
/// margin; zero when everything is clear.
fn collision_push(
    robot: &RobotModel,
    scene: &WorldScene,
    q: &JointConfig,
    margin: f64,
) -> DVector<f64> {
    let mut push = DVector::zeros(robot.dof());
    let poses = match forward_kinematics(robot, q) {
        Ok(p) => p,
        Err(_) => return push,
    };
    let centers: Vec<_> = robot
        .spheres
        .iter()
        .map(|s| poses[s.link_index].transform_point(&s.center_vec()))
        .collect();
    for (sphere, center) in robot.spheres.iter().zip(&centers) {
        let mut clearance = f64::INFINITY;
        let mut nearest = None;
        for obstacle in scene.obstacles() {
            let c = obstacle.signed_distance(center) - sphere.radius;
            if c < clearance {
                clearance = c;
                nearest = Some(obstacle);
            }
        }
        let hinge = margin - clearance;
        if hinge <= 0.0 {
            continue;
        }
        let direction = nearest.expect("nearest obstacle").distance_gradient(center);
        let jac = point_jacobian(robot, &poses, sphere.link_index, center);
        for j in 0..robot.dof() {
            push[j] += hinge * direction.dot(&jac.column(j));
        }
    }
    for i in 0..robot.spheres.len() {
        for k in (i + 1)..robot.spheres.len() {
            let (a, b) = (&robot.spheres[i], &robot.spheres[k]);
            if robot.ignores_pair(a.link_index, b.link_index) {
                continue;
            }
            let delta = centers[i] - centers[k];
            let dist = delta.norm();
            let hinge = margin - (dist - (a.radius + b.radius));
            if hinge <= 0.0 || dist < 1e-12 {
                continue;
            }
            let u = delta / dist;
            let jac_i = point_jacobian(robot, &poses, a.link_index, &centers[i]);
            let jac_k = point_jacobian(robot, &poses, b.link_index, &centers[k]);
            for j in 0..robot.dof() {
                push[j] += hinge * (u.dot(&jac_i.column(j)) - u.dot(&jac_k.column(j)));
            }
        }
    }
    push
}

fn solve_from(
    robot: &RobotModel,
    scene: &WorldScene,
    goal: &Pose,
    mut q: Vec<f64>,
    opts: &IkOptions,
    iters_used: &mut u64,
) -> (Option<IkSolution>, f64, f64) {
    let mut best = (f64::INFINITY, f64::INFINITY);
    for _ in 0..opts.max_iters {
        *iters_used += 1;
        let config = JointConfig(q.clone());
        let poses = forward_kinematics(robot, &config).expect("dims fixed");
        let ee = poses[robot.end_effector_link];
        let e_pos = goal.position - ee.position;
        let phi = rotation_vector(&(goal.orientation * ee.orientation.inverse()));
        let pos_err = e_pos.norm();
        let rot_err = phi.norm();
        if pos_err + rot_err < best.0 + best.1 {
            best = (pos_err, rot_err);
        }

        if pos_err < opts.position_tol && rot_err < opts.rotation_tol {
            let report = robot_clearance(robot, scene, &config).expect("dims fixed");
            let clearance = report.min();
            if clearance >= 0.0 && robot.within_limits(&config, 1e-9) {
                return (
                    Some(IkSolution {
                        config,
                        position_error: pos_err,
                        rotation_error: rot_err,
                        clearance,
                    }),
                    best.0,
                    best.1,
                );
            }
            // Pose is fine but the config collides: push and keep iterating.
        }

        // Damped least-squares step on the 6D residual.
        let jac = jacobian_from_poses(robot, &poses);
        let residual = Vector6::new(e_pos.x, e_pos.y, e_pos.z, phi.x, phi.y, phi.z);
        let jjt = &jac * jac.transpose() + Matrix6::identity() * (opts.damping * opts.damping);
        let step = match jjt.cholesky() {
            Some(ch) => jac.transpose() * ch.solve(&residual),
            None => jac.transpose() * residual * 0.1,
        };
        let cap = step.amax().max(1e-12);
        let scale = if cap > 0.3 { 0.3 / cap } else { 1.0 };

        let push = collision_push(robot, scene, &JointConfig(q.clone()), opts.clearance_margin);
        let push_cap = push.amax();
        let push_scale = if push_cap > 0.05 { 0.05 / push_cap } else { 1.0 };

        for j in 0..robot.dof() {
            q[j] += step[j] * scale + push[j] * push_scale * 5.0;
        }
        robot.clamp_config(&mut q);
    }
    (None, best.0, best.1)
}

/// Deterministic local refinement from a given configuration, used to snap a
/// trajectory's terminal knot onto the goal pose well inside the tolerances.
pub fn polish_config(
    robot: &RobotModel,
    scene: &WorldScene,
    goal: &Pose,
    start: &JointConfig,
    opts: &IkOptions,
) -> Option<IkSolution> {
    let mut iters = 0u64;
    let (solution, _, _) = solve_from(robot, scene, goal, start.0.clone(), opts, &mut iters);
    solution
}

/// Collision-free IK solutions from `n_seeds` random starts, ranked by pose
/// residual, then by clearance (larger first).
pub fn ik_solve(
    robot: &RobotModel,
    scene: &WorldScene,
    goal: &Pose,
    n_seeds: usize,
    rng_seed: u64,
    opts: &IkOptions,
) -> Result<(Vec<IkSolution>, u64), SolverError> {
    assert!(n_seeds >= 1);
    let mut solutions: Vec<IkSolution> = Vec::new();
    let mut best_pos = f64::INFINITY;
    let mut best_rot = f64::INFINITY;
    let mut iters = 0u64;
    for seed in 0..n_seeds {
        let mut rng = derive_rng(rng_seed, 0x1b, seed as u64);
        let q0: Vec<f64> = robot
            .joints
            .iter()
            .map(|j| rng.random_range(j.limits.lower..=j.limits.upper))
            .collect();
        let (solution, pos, rot) = solve_from(robot, scene, goal, q0, opts, &mut iters);
        if pos + rot < best_pos + best_rot {
            best_pos = pos;
            best_rot = rot;
        }
        if let Some(s) = solution {
            solutions.push(s);
        }
    }
    if solutions.is_empty() {
        return Err(SolverError::Unreachable {
            position_error: best_pos,
            rotation_error: best_rot,
        });
    }
    solutions.sort_by(|a, b| {
        a.residual()
            .partial_cmp(&b.residual())
            .unwrap()
            .then(b.clearance.partial_cmp(&a.clearance).unwrap())
    });
    Ok((solutions, iters))
}

//! Three-stage trajectory planner: collision-free IK seeding, seed
//! trajectory generation, and parallel particle + quasi-Newton refinement
//! with a final timestep re-optimization.
//!
//! Candidate trajectories are processed by a worker pool; every candidate's
//! computation is a fixed sequential program seeded from (rng_seed, index),
//! and the winner is picked by an ordered reduction, so results are bitwise
//! identical for any worker-thread count.

mod ik;
mod lbfgs;
mod particle;

pub use ik::{ik_solve, IkOptions, IkSolution};
pub use lbfgs::{lbfgs_refine, LbfgsOptions, LbfgsOutcome};
pub use particle::{particle_refine, ParticleOptions, ParticleOutcome};

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::collision::{dense_validate, sweep_check, SweepReport};
use crate::costs::{
    collision_cost, goal_cost, hold_orientation_cost, self_collision_cost, smooth_cost, CostEval,
    CostWeights, Trajectory,
};
use crate::geometry::{rotation_vector, Pose};
use crate::model::{end_effector_pose, JointConfig, JointLimits, ModelError, RobotModel};
use crate::world::WorldScene;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("no IK seed converged (best residual {position_error:.4} m, {rotation_error:.4} rad)")]
    Unreachable {
        position_error: f64,
        rotation_error: f64,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid plan request: {0}")]
    InvalidRequest(String),
}

/// Deterministic per-task RNG derivation; (tag, index) pick the stream.
pub(crate) fn derive_rng(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(
        seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xBF58_476D_1CE4_E5B9),
    )
}

/// Solver knobs beyond the request itself.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub lbfgs_memory: usize,
    pub lbfgs_max_iters: usize,
    pub grad_tol: f64,
    pub particle_iters: usize,
    pub ik_max_iters: usize,
    /// Swept-check margin applied to the final trajectory.
    pub safety_margin: f64,
    /// Hinge margin for the self-collision term inside the objective.
    pub self_collision_margin: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            lbfgs_memory: 10,
            lbfgs_max_iters: 150,
            grad_tol: 1e-6,
            particle_iters: 20,
            ik_max_iters: 120,
            safety_margin: 0.01,
            self_collision_margin: 0.01,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PlanRequest {
    pub start: JointConfig,
    pub goal: Pose,
    pub weights: CostWeights,
    pub num_seeds: usize,
    pub timesteps: usize,
    pub dt: f64,
    pub hold_orientation: Option<Pose>,
    pub rng_seed: u64,
    pub rotation_tol: f64,
    pub position_tol: f64,
    /// Extra candidate injected ahead of the generated seeds (receding-horizon
    /// warm starting).
    pub warm_start: Option<Trajectory>,
    pub options: SolverOptions,
}

impl Default for PlanRequest {
    fn default() -> Self {
        PlanRequest {
            start: JointConfig(Vec::new()),
            goal: Pose::identity(),
            weights: CostWeights::default(),
            num_seeds: 32,
            timesteps: 64,
            dt: 0.01,
            hold_orientation: None,
            rng_seed: 0,
            rotation_tol: 1e-2,
            position_tol: 1e-3,
            warm_start: None,
            options: SolverOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FailureReason {
    IkFailed,
    CollisionResidual,
    GoalTolerance,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageStats {
    pub stage: String,
    pub iterations: u64,
    #[serde(with = "crate::wire::float")]
    pub best_cost: f64,
    pub cost_evals: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanResult {
    pub trajectory: Trajectory,
    pub success: bool,
    #[serde(with = "crate::wire::float")]
    pub final_cost: f64,
    pub planning_wall_time: f64,
    pub stage_stats: Vec<StageStats>,
    pub failure_reason: Option<FailureReason>,
    /// Minimum clearance observed by the final sweep (unpadded).
    #[serde(with = "crate::wire::float")]
    pub min_clearance: f64,
    #[serde(with = "crate::wire::float")]
    pub position_error: f64,
    #[serde(with = "crate::wire::float")]
    pub rotation_error: f64,
}

/// Shared evaluation context: a frozen (robot, scene, weights, goal) tuple
/// plus an evaluation counter for the O(N×T×K) accounting.
pub struct PlanCost<'a> {
    pub robot: &'a RobotModel,
    pub scene: &'a WorldScene,
    pub weights: CostWeights,
    pub goal: Pose,
    pub hold_orientation: Option<Pose>,
    pub limits: Vec<JointLimits>,
    pub self_collision_margin: f64,
    evals: AtomicU64,
}

impl<'a> PlanCost<'a> {
    pub fn new(
        robot: &'a RobotModel,
        scene: &'a WorldScene,
        weights: CostWeights,
        goal: Pose,
        hold_orientation: Option<Pose>,
        self_collision_margin: f64,
    ) -> Self {
        PlanCost {
            robot,
            scene,
            weights,
            goal,
            hold_orientation,
            limits: robot.limits(),
            self_collision_margin,
            evals: AtomicU64::new(0),
        }
    }

    /// Total objective with gradient: goal + smoothness/limits + collision
    /// (+ self-collision, + optional pose hold). The collision hinge is also
    /// sampled at interval midpoints so knots cannot cut corners through
    /// obstacles between samples; the midpoint gradient splits evenly onto
    /// the two neighboring knots.
    pub fn evaluate(&self, traj: &Trajectory) -> CostEval {
        self.evals.fetch_add(1, Ordering::Relaxed);
        let mut eval = smooth_cost(traj, &self.weights, &self.limits);
        eval.accumulate(&goal_cost(self.robot, traj, &self.goal, &self.weights).expect("dims"));
        eval.accumulate(
            &collision_cost(self.robot, self.scene, traj, &self.weights).expect("dims"),
        );
        self.accumulate_midpoint_collision(traj, &mut eval);
        eval.accumulate(
            &self_collision_cost(
                self.robot,
                traj,
                self.self_collision_margin,
                self.weights.w_coll,
            )
            .expect("dims"),
        );
        if let Some(reference) = &self.hold_orientation {
            eval.accumulate(
                &hold_orientation_cost(self.robot, traj, reference, &self.weights).expect("dims"),
            );
        }
        eval
    }

    fn accumulate_midpoint_collision(&self, traj: &Trajectory, eval: &mut CostEval) {
        if self.weights.w_coll == 0.0 || self.scene.is_empty() || self.robot.spheres.is_empty() {
            return;
        }
        let mid = Trajectory {
            dt: traj.dt,
            knots: traj
                .knots
                .windows(2)
                .map(|w| {
                    w[0].iter()
                        .zip(&w[1])
                        .map(|(a, b)| 0.5 * (a + b))
                        .collect()
                })
                .collect(),
        };
        let mid_eval = collision_cost(self.robot, self.scene, &mid, &self.weights).expect("dims");
        eval.value += mid_eval.value;
        for (t, row) in mid_eval.gradient.iter().enumerate() {
            for (j, g) in row.iter().enumerate() {
                eval.gradient[t][j] += 0.5 * g;
                eval.gradient[t + 1][j] += 0.5 * g;
            }
        }
    }

    pub fn evals(&self) -> u64 {
        self.evals.load(Ordering::Relaxed)
    }
}

/// Joint-space straight lines from the start to the IK solutions (cycled),
/// with Gaussian interior perturbations on every trajectory except the first
/// per IK target. Endpoints are never perturbed.
pub fn seed_trajectories(
    start: &JointConfig,
    iks: &[JointConfig],
    t_knots: usize,
    dt: f64,
    n: usize,
    rng_seed: u64,
) -> Vec<Trajectory> {
    assert!(!iks.is_empty(), "need at least one IK solution");
    (0..n)
        .map(|i| {
            let target = &iks[i % iks.len()];
            let mut traj = Trajectory::linear(start, target, t_knots, dt);
            if i >= iks.len() {
                let mut rng = derive_rng(rng_seed, 0x5eed, i as u64);
                let normal = Normal::new(0.0, 0.05).expect("positive sigma");
                for row in traj.knots[1..t_knots - 1].iter_mut() {
                    for v in row.iter_mut() {
                        *v += normal.sample(&mut rng);
                    }
                }
            }
            traj
        })
        .collect()
}

/// Uniformly rescale the timestep so velocity, acceleration, and jerk limits
/// hold; knot values are untouched. Scale 1 trajectories come back unchanged.
pub fn retime(traj: &Trajectory, limits: &[JointLimits]) -> Trajectory {
    let t_knots = traj.len();
    let dof = traj.dof();
    let inv_dt = 1.0 / traj.dt;
    let mut scale: f64 = 1.0;
    for j in 0..dof {
        let lim = &limits[j];
        let mut vel = vec![0.0; t_knots];
        let mut acc = vec![0.0; t_knots];
        for t in 1..t_knots {
            vel[t] = (traj.knots[t][j] - traj.knots[t - 1][j]) * inv_dt;
            scale = scale.max(vel[t].abs() / lim.max_velocity);
        }
        for t in 2..t_knots {
            acc[t] = (vel[t] - vel[t - 1]) * inv_dt;
            scale = scale.max((acc[t].abs() / lim.max_acceleration).sqrt());
        }
        for t in 3..t_knots {
            let jerk = (acc[t] - acc[t - 1]) * inv_dt;
            scale = scale.max((jerk.abs() / lim.max_jerk).cbrt());
        }
    }
    if scale <= 1.0 {
        return traj.clone();
    }
    Trajectory {
        dt: traj.dt * scale,
        knots: traj.knots.clone(),
    }
}

/// Full planning pipeline. Infeasible instances come back as
/// `success = false` with a failure reason; `Err` is reserved for malformed
/// requests.
pub fn plan(
    robot: &RobotModel,
    scene: &WorldScene,
    req: &PlanRequest,
) -> Result<PlanResult, SolverError> {
    if req.num_seeds < 1 {
        return Err(SolverError::InvalidRequest("num_seeds must be ≥ 1".into()));
    }
    if req.timesteps < 4 {
        return Err(SolverError::InvalidRequest("timesteps must be ≥ 4".into()));
    }
    if !(req.dt > 0.0) {
        return Err(SolverError::InvalidRequest("dt must be positive".into()));
    }
    robot.check_dof(&req.start)?;
    if let Some(w) = &req.warm_start {
        if w.dof() != robot.dof() {
            return Err(SolverError::InvalidRequest(
                "warm-start trajectory has wrong DOF".into(),
            ));
        }
    }

    let t0 = Instant::now();
    let mut stage_stats = Vec::new();
    let cost = PlanCost::new(
        robot,
        scene,
        req.weights,
        req.goal,
        req.hold_orientation,
        req.options.self_collision_margin,
    );

    let hold_at_start = |reason: FailureReason, stats: Vec<StageStats>, t0: Instant| PlanResult {
        trajectory: Trajectory::linear(&req.start, &req.start, req.timesteps, req.dt),
        success: false,
        final_cost: f64::INFINITY,
        planning_wall_time: t0.elapsed().as_secs_f64(),
        stage_stats: stats,
        failure_reason: Some(reason),
        min_clearance: f64::NAN,
        position_error: f64::NAN,
        rotation_error: f64::NAN,
    };

    // Stage 1: collision-free IK solutions.
    let ik_opts = IkOptions {
        position_tol: req.position_tol,
        rotation_tol: req.rotation_tol,
        max_iters: req.options.ik_max_iters,
        ..IkOptions::default()
    };
    let (iks, ik_iters) =
        match ik_solve(robot, scene, &req.goal, req.num_seeds, req.rng_seed, &ik_opts) {
            Ok(r) => r,
            Err(SolverError::Unreachable { .. }) => {
                stage_stats.push(StageStats {
                    stage: "ik".into(),
                    iterations: 0,
                    best_cost: f64::INFINITY,
                    cost_evals: 0,
                });
                return Ok(hold_at_start(FailureReason::IkFailed, stage_stats, t0));
            }
            Err(e) => return Err(e),
        };
    stage_stats.push(StageStats {
        stage: "ik".into(),
        iterations: ik_iters,
        best_cost: iks[0].position_error + iks[0].rotation_error,
        cost_evals: 0,
    });

    // Stage 2: seed trajectories (plus the warm-start candidate, if any).
    let ik_configs: Vec<JointConfig> = iks.iter().map(|s| s.config.clone()).collect();
    let mut seeds = seed_trajectories(
        &req.start,
        &ik_configs,
        req.timesteps,
        req.dt,
        req.num_seeds,
        req.rng_seed,
    );
    if let Some(warm) = &req.warm_start {
        let mut warm = warm.clone();
        warm.dt = req.dt;
        resample_knots(&mut warm, req.timesteps);
        warm.knots[0] = req.start.0.clone();
        seeds.push(warm);
    }
    let evals_before = cost.evals();
    let seed_costs: Vec<f64> = seeds.par_iter().map(|t| cost.evaluate(t).value).collect();
    let best_seed_cost = seed_costs.iter().copied().fold(f64::INFINITY, f64::min);
    stage_stats.push(StageStats {
        stage: "seeds".into(),
        iterations: seeds.len() as u64,
        best_cost: best_seed_cost,
        cost_evals: cost.evals() - evals_before,
    });

    // Stage 3a: particle refinement.
    let evals_before = cost.evals();
    let particle_opts = ParticleOptions {
        iters: req.options.particle_iters,
        ..ParticleOptions::default()
    };
    let (candidates, particle) = particle_refine(seeds, &cost, &particle_opts, req.rng_seed);
    stage_stats.push(StageStats {
        stage: "particle".into(),
        iterations: particle.iterations,
        best_cost: particle.best_cost,
        cost_evals: cost.evals() - evals_before,
    });

    // Stage 3b: parallel quasi-Newton refinement, ordered reduction.
    let evals_before = cost.evals();
    let lbfgs_opts = LbfgsOptions {
        memory: req.options.lbfgs_memory,
        max_iters: req.options.lbfgs_max_iters,
        grad_tol: req.options.grad_tol,
        fix_terminal: false,
    };
    let refined: Vec<(Trajectory, LbfgsOutcome)> = candidates
        .into_par_iter()
        .map(|t| lbfgs_refine(&t, &cost, &lbfgs_opts))
        .collect();
    let mut best_idx = 0;
    for (i, (_, outcome)) in refined.iter().enumerate() {
        if outcome.final_cost < refined[best_idx].1.final_cost {
            best_idx = i;
        }
    }
    let lbfgs_iters: u64 = refined.iter().map(|(_, o)| o.iterations).sum();
    let final_cost = refined[best_idx].1.final_cost;
    stage_stats.push(StageStats {
        stage: "lbfgs".into(),
        iterations: lbfgs_iters,
        best_cost: final_cost,
        cost_evals: cost.evals() - evals_before,
    });

    // Snap the terminal knot onto the goal: the smoothness terms otherwise
    // hold it at a small equilibrium offset right around the tolerance.
    let mut best_traj = refined[best_idx].0.clone();
    let polish_opts = IkOptions {
        position_tol: req.position_tol * 0.1,
        rotation_tol: req.rotation_tol * 0.1,
        max_iters: 60,
        ..IkOptions::default()
    };
    if let Some(polished) = ik::polish_config(
        robot,
        scene,
        &req.goal,
        &best_traj.end(),
        &polish_opts,
    ) {
        *best_traj.knots.last_mut().unwrap() = polished.config.0;
    }

    // Re-time, clamp into position limits, final sweep.
    let mut trajectory = retime(&best_traj, &cost.limits);
    for knot in trajectory.knots.iter_mut() {
        robot.clamp_config(knot);
    }

    let sweep = final_sweep(robot, scene, &trajectory, req.options.safety_margin);
    let ee = end_effector_pose(robot, &trajectory.end())?;
    let position_error = (req.goal.position - ee.position).norm();
    let rotation_error =
        rotation_vector(&(req.goal.orientation * ee.orientation.inverse())).norm();

    let collision_ok =
        sweep.collision_free && dense_validate(robot, scene, &trajectory, 0.0, 32);
    let pose_ok = position_error < req.position_tol && rotation_error < req.rotation_tol;
    let limits_ok = trajectory
        .knots
        .iter()
        .all(|k| robot.within_limits(&JointConfig(k.clone()), 1e-9));

    let failure_reason = if !collision_ok {
        Some(FailureReason::CollisionResidual)
    } else if !(pose_ok && limits_ok) {
        Some(FailureReason::GoalTolerance)
    } else {
        None
    };

    Ok(PlanResult {
        trajectory,
        success: failure_reason.is_none(),
        final_cost,
        planning_wall_time: t0.elapsed().as_secs_f64(),
        stage_stats,
        failure_reason,
        min_clearance: sweep.min_clearance,
        position_error,
        rotation_error,
    })
}

fn final_sweep(
    robot: &RobotModel,
    scene: &WorldScene,
    traj: &Trajectory,
    margin: f64,
) -> SweepReport {
    sweep_check(robot, scene, traj, margin, traj.dt / 1024.0)
}

/// Linearly resample a trajectory onto a different knot count (same duration
/// semantics are not needed for warm starts; the horizon is re-timed anyway).
fn resample_knots(traj: &mut Trajectory, t_knots: usize) {
    if traj.len() == t_knots {
        return;
    }
    let src = traj.clone();
    let knots = (0..t_knots)
        .map(|k| {
            let s = k as f64 / (t_knots - 1) as f64 * src.duration();
            crate::collision::interpolate(&src, s).0
        })
        .collect();
    traj.knots = knots;
}

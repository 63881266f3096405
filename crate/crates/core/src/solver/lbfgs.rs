//! Limited-memory quasi-Newton refinement of a single trajectory.

use nalgebra::DVector;

use crate::costs::Trajectory;

use super::PlanCost;

#[derive(Debug, Clone, Copy)]
pub struct LbfgsOptions {
    /// Number of (s, y) history pairs kept for the curvature estimate.
    pub memory: usize,
    pub max_iters: usize,
    /// Terminate once the free-variable gradient L2 norm drops below this.
    pub grad_tol: f64,
    /// Pin the last knot in addition to the first (used when the target is a
    /// configuration rather than a pose).
    pub fix_terminal: bool,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        LbfgsOptions {
            memory: 10,
            max_iters: 150,
            grad_tol: 1e-6,
            fix_terminal: false,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LbfgsOutcome {
    pub iterations: u64,
    pub final_cost: f64,
    pub line_search_failed: bool,
}

struct FreeVars {
    first: usize,
    last: usize, // exclusive
    dof: usize,
}

impl FreeVars {
    fn flatten(&self, traj: &Trajectory) -> DVector<f64> {
        let mut x = DVector::zeros((self.last - self.first) * self.dof);
        for (row, knot) in traj.knots[self.first..self.last].iter().enumerate() {
            for (col, v) in knot.iter().enumerate() {
                x[row * self.dof + col] = *v;
            }
        }
        x
    }

    fn unflatten(&self, x: &DVector<f64>, traj: &mut Trajectory) {
        for row in 0..(self.last - self.first) {
            for col in 0..self.dof {
                traj.knots[self.first + row][col] = x[row * self.dof + col];
            }
        }
    }

    fn gradient(&self, grad: &[Vec<f64>]) -> DVector<f64> {
        let mut g = DVector::zeros((self.last - self.first) * self.dof);
        for (row, knot) in grad[self.first..self.last].iter().enumerate() {
            for (col, v) in knot.iter().enumerate() {
                g[row * self.dof + col] = *v;
            }
        }
        g
    }
}

/// L-BFGS with Armijo backtracking over the trajectory's free knots (the
/// start knot is always pinned). The returned trajectory never costs more
/// than the input.
pub fn lbfgs_refine(
    traj: &Trajectory,
    cost: &PlanCost,
    opts: &LbfgsOptions,
) -> (Trajectory, LbfgsOutcome) {
    let t_knots = traj.len();
    let free = FreeVars {
        first: 1,
        last: if opts.fix_terminal { t_knots - 1 } else { t_knots },
        dof: traj.dof(),
    };
    let mut outcome = LbfgsOutcome::default();
    if free.last <= free.first {
        let eval = cost.evaluate(traj);
        outcome.final_cost = eval.value;
        return (traj.clone(), outcome);
    }

    let mut current = traj.clone();
    let mut x = free.flatten(&current);
    let eval = cost.evaluate(&current);
    let mut f = eval.value;
    let mut g = free.gradient(&eval.gradient);

    let mut history: Vec<(DVector<f64>, DVector<f64>, f64)> = Vec::new(); // (s, y, 1/sᵀy)

    for _ in 0..opts.max_iters {
        if g.norm() < opts.grad_tol {
            break;
        }

        // Two-loop recursion.
        let mut d = -g.clone();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let alpha = rho * s.dot(&d);
            d.axpy(-alpha, y, 1.0);
            alphas.push(alpha);
        }
        if let Some((s, y, _)) = history.last() {
            let gamma = s.dot(y) / y.dot(y);
            d *= gamma;
        }
        for ((s, y, rho), alpha) in history.iter().zip(alphas.into_iter().rev()) {
            let beta = rho * y.dot(&d);
            d.axpy(alpha - beta, s, 1.0);
        }

        let mut slope = g.dot(&d);
        if slope >= 0.0 {
            // Stale curvature; fall back to steepest descent.
            history.clear();
            d = -g.clone();
            slope = g.dot(&d);
        }

        // Armijo backtracking.
        let c1 = 1e-4;
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            let x_new = &x + &d * step;
            free.unflatten(&x_new, &mut current);
            let eval_new = cost.evaluate(&current);
            if eval_new.value <= f + c1 * step * slope {
                accepted = Some((x_new, eval_new));
                break;
            }
            step *= 0.5;
        }
        let Some((x_new, eval_new)) = accepted else {
            free.unflatten(&x, &mut current); // restore best iterate
            outcome.line_search_failed = true;
            break;
        };

        let s = &x_new - &x;
        let y = free.gradient(&eval_new.gradient) - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            history.push((s, y.clone(), 1.0 / sy));
            if history.len() > opts.memory {
                history.remove(0);
            }
        }

        x = x_new;
        f = eval_new.value;
        g = free.gradient(&eval_new.gradient);
        free.unflatten(&x, &mut current);
        outcome.iterations += 1;
    }

    free.unflatten(&x, &mut current);
    outcome.final_cost = f;
    (current, outcome)
}

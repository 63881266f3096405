//! Derivative-free trajectory improvement: sample perturbed candidates
//! around the current elites, keep the best.

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::costs::Trajectory;

use super::{derive_rng, PlanCost};

#[derive(Debug, Clone, Copy)]
pub struct ParticleOptions {
    pub iters: usize,
    /// Initial perturbation sigma (rad or m per joint), decayed per iteration.
    pub sigma: f64,
    pub sigma_decay: f64,
}

impl Default for ParticleOptions {
    fn default() -> Self {
        ParticleOptions {
            iters: 20,
            sigma: 0.2,
            sigma_decay: 0.88,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ParticleOutcome {
    pub iterations: u64,
    pub best_cost: f64,
}

/// Cross-entropy-style refinement. The population size stays fixed; the top
/// quartile survives each iteration and seeds the replacements, so the best
/// cost never increases. `iters = 0` returns the seeds untouched.
pub fn particle_refine(
    seeds: Vec<Trajectory>,
    cost: &PlanCost,
    opts: &ParticleOptions,
    rng_seed: u64,
) -> (Vec<Trajectory>, ParticleOutcome) {
    let n = seeds.len();
    let mut population: Vec<(Trajectory, f64)> = seeds
        .into_par_iter()
        .map(|t| {
            let c = cost.evaluate(&t).value;
            (t, c)
        })
        .collect();

    let mut outcome = ParticleOutcome {
        iterations: 0,
        best_cost: population
            .iter()
            .map(|(_, c)| *c)
            .fold(f64::INFINITY, f64::min),
    };
    if n < 2 {
        return (population.into_iter().map(|(t, _)| t).collect(), outcome);
    }

    let n_elite = n.div_ceil(4);
    let mut sigma = opts.sigma;
    for iter in 0..opts.iters {
        // Elite indices: by cost, ties by slot.
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            population[a]
                .1
                .partial_cmp(&population[b].1)
                .unwrap()
                .then(a.cmp(&b))
        });
        let elite_idx = &order[..n_elite];
        let elite_set: Vec<bool> = {
            let mut s = vec![false; n];
            for &i in elite_idx {
                s[i] = true;
            }
            s
        };

        // Each non-elite slot draws one perturbed candidate around a cycled
        // elite and keeps the better of (incumbent, candidate). Slots only
        // ever improve, so diversity in the population survives until beaten
        // outright. Perturbations are low-frequency sine bumps per joint
        // (white per-knot noise is ruinously expensive under acceleration and
        // jerk costs) in antithetic ± pairs.
        let slots: Vec<usize> = (0..n).filter(|&s| !elite_set[s]).collect();
        let kids: Vec<(usize, Trajectory)> = slots
            .iter()
            .enumerate()
            .map(|(k, &slot)| {
                // Antithetic pairs: consecutive kids share a base elite and a
                // draw, with mirrored sign.
                let base = &population[elite_idx[(k / 2) % n_elite]].0;
                let mut rng = derive_rng(rng_seed, 0x2c ^ iter as u64, (k / 2) as u64);
                let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
                let normal = Normal::new(0.0, sigma).expect("positive sigma");
                let mut t = base.clone();
                let t_knots = t.len();
                let dof = t.dof();
                let amps: Vec<(f64, f64)> = (0..dof)
                    .map(|_| {
                        (
                            sign * normal.sample(&mut rng),
                            sign * 0.5 * normal.sample(&mut rng),
                        )
                    })
                    .collect();
                for (row_idx, row) in t.knots.iter_mut().enumerate().skip(1) {
                    let s = row_idx as f64 / (t_knots - 1) as f64 * std::f64::consts::PI;
                    for (v, (a1, a2)) in row.iter_mut().zip(&amps) {
                        *v += a1 * s.sin() + a2 * (2.0 * s).sin();
                    }
                }
                (slot, t)
            })
            .collect();

        let scored: Vec<(usize, Trajectory, f64)> = kids
            .into_par_iter()
            .map(|(slot, t)| {
                let c = cost.evaluate(&t).value;
                (slot, t, c)
            })
            .collect();
        for (slot, t, c) in scored {
            if c < population[slot].1 {
                population[slot] = (t, c);
            }
        }
        sigma = (sigma * opts.sigma_decay).max(1e-3);
        outcome.iterations += 1;
    }

    outcome.best_cost = population
        .iter()
        .map(|(_, c)| *c)
        .fold(f64::INFINITY, f64::min);
    (population.into_iter().map(|(t, _)| t).collect(), outcome)
}

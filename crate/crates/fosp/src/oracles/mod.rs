//! Brute-force ground truth on tabular problems: unconstrained and
//! zero-cost-constrained value iteration, exact reach-violation dynamic
//! programming, enumeration TD(lambda), bisection expectiles, and
//! Monte-Carlo policy evaluation.
//!
//! Nothing here touches learned components; this module is the reference
//! the training stack is checked against.

use crate::{FospError, Result};
use ndarray::{Array2, Array3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const MAX_SWEEPS: usize = 100_000;
pub const VI_RESIDUAL: f64 = 1e-10;
pub const REACH_RESIDUAL: f64 = 1e-9;

/// Finite CMDP: stochastic transition tensor, reward and cost tables, a
/// per-state hazard indicator, and a start state.
#[derive(Clone, Debug)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// `[s, a, s']`, each `(s, a)` row sums to 1.
    pub transition: Array3<f64>,
    pub reward: Array2<f64>,
    /// Expected arrival-hazard per `(s, a)`; binary when dynamics are
    /// deterministic.
    pub cost: Array2<f64>,
    pub hazard: Vec<bool>,
    pub gamma: f64,
    pub start: usize,
}

impl TabularMdp {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(FospError::InvalidArgument("gamma must be in (0,1)".into()));
        }
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let row: f64 = (0..self.n_states).map(|t| self.transition[[s, a, t]]).sum();
                if (row - 1.0).abs() > 1e-12 {
                    return Err(FospError::InvalidArgument(format!(
                        "transition row ({s},{a}) sums to {row}"
                    )));
                }
                let c = self.cost[[s, a]];
                if !(0.0..=1.0).contains(&c) {
                    return Err(FospError::InvalidArgument(format!("cost ({s},{a}) = {c}")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ViSolution {
    pub values: Vec<f64>,
    pub q: Array2<f64>,
    pub policy: Vec<usize>,
    pub residual: f64,
}

/// Unconstrained value iteration to Bellman residual below [`VI_RESIDUAL`].
pub fn value_iteration(mdp: &TabularMdp) -> ViSolution {
    let all: Vec<Vec<usize>> = (0..mdp.n_states).map(|_| (0..mdp.n_actions).collect()).collect();
    restricted_value_iteration(mdp, &all)
}

fn restricted_value_iteration(mdp: &TabularMdp, allowed: &[Vec<usize>]) -> ViSolution {
    let mut v = vec![0.0; mdp.n_states];
    let mut residual = f64::INFINITY;
    for _ in 0..MAX_SWEEPS {
        residual = 0.0;
        let mut next = vec![0.0; mdp.n_states];
        for s in 0..mdp.n_states {
            let mut best = f64::NEG_INFINITY;
            for &a in &allowed[s] {
                let mut q = mdp.reward[[s, a]];
                for t in 0..mdp.n_states {
                    let p = mdp.transition[[s, a, t]];
                    if p > 0.0 {
                        q += mdp.gamma * p * v[t];
                    }
                }
                best = best.max(q);
            }
            if best == f64::NEG_INFINITY {
                best = 0.0; // no allowed action: treated as absorbing
            }
            next[s] = best;
            residual = residual.max((next[s] - v[s]).abs());
        }
        v = next;
        if residual < VI_RESIDUAL {
            break;
        }
    }
    let mut q = Array2::zeros((mdp.n_states, mdp.n_actions));
    let mut policy = vec![0; mdp.n_states];
    for s in 0..mdp.n_states {
        let mut best = f64::NEG_INFINITY;
        for a in 0..mdp.n_actions {
            let mut qa = mdp.reward[[s, a]];
            for t in 0..mdp.n_states {
                let p = mdp.transition[[s, a, t]];
                if p > 0.0 {
                    qa += mdp.gamma * p * v[t];
                }
            }
            q[[s, a]] = qa;
            if allowed[s].contains(&a) && qa > best {
                best = qa;
                policy[s] = a;
            }
        }
    }
    ViSolution {
        values: v,
        q,
        policy,
        residual,
    }
}

#[derive(Clone, Debug)]
pub struct ConstrainedViSolution {
    pub values: Vec<f64>,
    pub policy: Vec<usize>,
    /// States from which hazards are avoidable forever (surely).
    pub feasible: Vec<bool>,
    /// Per-state actions whose entire successor support stays feasible.
    pub safe_actions: Vec<Vec<usize>>,
}

/// Zero-cost-constrained value iteration: restrict to the action set that
/// keeps the state surely inside the feasible set, then value-iterate.
/// On infeasible states the returned policy falls back to the unconstrained
/// greedy action so it is defined everywhere.
pub fn constrained_value_iteration(mdp: &TabularMdp) -> Result<ConstrainedViSolution> {
    // Viability kernel: start from all non-hazard states, shrink.
    let mut feasible: Vec<bool> = mdp.hazard.iter().map(|h| !h).collect();
    loop {
        let mut changed = false;
        for s in 0..mdp.n_states {
            if !feasible[s] {
                continue;
            }
            let ok = (0..mdp.n_actions).any(|a| {
                (0..mdp.n_states).all(|t| mdp.transition[[s, a, t]] == 0.0 || feasible[t])
            });
            if !ok {
                feasible[s] = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    if !feasible[mdp.start] {
        return Err(FospError::Infeasible(format!(
            "start state {} is outside the zero-violation feasible set",
            mdp.start
        )));
    }

    let safe_actions: Vec<Vec<usize>> = (0..mdp.n_states)
        .map(|s| {
            if !feasible[s] {
                return Vec::new();
            }
            (0..mdp.n_actions)
                .filter(|&a| (0..mdp.n_states).all(|t| mdp.transition[[s, a, t]] == 0.0 || feasible[t]))
                .collect()
        })
        .collect();

    let unconstrained = value_iteration(mdp);
    let restricted: Vec<Vec<usize>> = safe_actions
        .iter()
        .enumerate()
        .map(|(s, acts)| {
            if acts.is_empty() {
                vec![unconstrained.policy[s]]
            } else {
                acts.clone()
            }
        })
        .collect();
    let sol = restricted_value_iteration(mdp, &restricted);

    let mut policy = sol.policy;
    for s in 0..mdp.n_states {
        if !feasible[s] {
            policy[s] = unconstrained.policy[s];
        }
    }
    Ok(ConstrainedViSolution {
        values: sol.values,
        policy,
        feasible,
        safe_actions,
    })
}

/// Fixed point of `v(s) = 1 if hazard(s) else gamma_u * E[v(s')]` under the
/// given deterministic policy, iterated to residual below [`REACH_RESIDUAL`].
pub fn exact_reach_violation(mdp: &TabularMdp, policy: &[usize], gamma_u: f64) -> Vec<f64> {
    assert_eq!(policy.len(), mdp.n_states, "policy must cover all states");
    let mut v = vec![0.0; mdp.n_states];
    for _ in 0..MAX_SWEEPS {
        let mut residual = 0.0f64;
        let mut next = vec![0.0; mdp.n_states];
        for s in 0..mdp.n_states {
            next[s] = if mdp.hazard[s] {
                1.0
            } else {
                let a = policy[s];
                let mut e = 0.0;
                for t in 0..mdp.n_states {
                    let p = mdp.transition[[s, a, t]];
                    if p > 0.0 {
                        e += p * v[t];
                    }
                }
                gamma_u * e
            };
            residual = residual.max((next[s] - v[s]).abs());
        }
        v = next;
        if residual < REACH_RESIDUAL {
            break;
        }
    }
    v
}

/// Residual of the reach-violation Bellman equation for a candidate table.
pub fn reach_violation_residual(mdp: &TabularMdp, policy: &[usize], gamma_u: f64, v: &[f64]) -> f64 {
    let mut worst = 0.0f64;
    for s in 0..mdp.n_states {
        let target = if mdp.hazard[s] {
            1.0
        } else {
            let a = policy[s];
            let e: f64 = (0..mdp.n_states).map(|t| mdp.transition[[s, a, t]] * v[t]).sum();
            gamma_u * e
        };
        worst = worst.max((v[s] - target).abs());
    }
    worst
}

/// TD(lambda) returns by explicit expansion into weighted n-step returns,
/// not the recurrence. `rewards` has length H, `values` length H+1 aligned
/// so `values[h]` is the value at step h; the result has length H+1 with the
/// terminal entry equal to `values[H]`.
pub fn enumerate_td_lambda(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Vec<f64> {
    let horizon = rewards.len();
    assert_eq!(values.len(), horizon + 1, "values must have H+1 entries");
    let n_step = |h: usize, n: usize| -> f64 {
        let mut g = 0.0;
        let mut disc = 1.0;
        for k in 1..=n {
            g += disc * rewards[h + k - 1];
            disc *= gamma;
        }
        g + disc * values[h + n]
    };
    let mut out = Vec::with_capacity(horizon + 1);
    for h in 0..horizon {
        let steps_left = horizon - h;
        let mut r = 0.0;
        for n in 1..steps_left {
            r += (1.0 - lambda) * lambda.powi(n as i32 - 1) * n_step(h, n);
        }
        r += lambda.powi(steps_left as i32 - 1) * n_step(h, steps_left);
        out.push(r);
    }
    out.push(values[horizon]);
    out
}

/// Solves the expectile first-order condition
/// `sum_i |tau - 1{x_i < e}| * (x_i - e) = 0` by bisection.
pub fn expectile_bisection(samples: &[f64], tau: f64) -> f64 {
    assert!(!samples.is_empty(), "need at least one sample");
    assert!(tau > 0.0 && tau < 1.0, "tau in (0,1)");
    let foc = |e: f64| -> f64 {
        samples
            .iter()
            .map(|&x| {
                let w = if x < e { 1.0 - tau } else { tau };
                w * (x - e)
            })
            .sum()
    };
    let mut lo = samples.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut hi = samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return lo;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let f = foc(mid);
        if f.abs() < 1e-12 {
            return mid;
        }
        // the first-order condition is strictly decreasing in e
        if f > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Undiscounted episode-return metrics averaged over seeded episodes.
/// `cost_regret` is the running average of per-episode cost, i.e. the mean
/// cost over everything executed so far.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalMetrics {
    pub reward: f64,
    pub cost: f64,
    pub cost_regret: f64,
}

/// Aggregates per-episode (reward return, cost return) pairs produced by
/// `run(episode_seed)` into the three evaluation metrics.
pub fn monte_carlo_eval<F>(episodes: usize, seed: u64, mut run: F) -> EvalMetrics
where
    F: FnMut(u64) -> (f64, f64),
{
    assert!(episodes >= 1, "episodes >= 1");
    let mut seeder = ChaCha8Rng::seed_from_u64(seed);
    let mut reward_sum = 0.0;
    let mut cost_sum = 0.0;
    for _ in 0..episodes {
        let ep_seed: u64 = seeder.random();
        let (r, c) = run(ep_seed);
        reward_sum += r;
        cost_sum += c;
    }
    EvalMetrics {
        reward: reward_sum / episodes as f64,
        cost: cost_sum / episodes as f64,
        cost_regret: cost_sum / episodes as f64,
    }
}

/// Simulates one episode of a deterministic tabular policy by sampling the
/// MDP transitions, returning undiscounted return sums.
pub fn simulate_tabular_episode(
    mdp: &TabularMdp,
    policy: &[usize],
    horizon: usize,
    terminal: impl Fn(usize) -> bool,
    seed: u64,
) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = mdp.start;
    let mut reward = 0.0;
    let mut cost = 0.0;
    for _ in 0..horizon {
        let a = policy[s];
        reward += mdp.reward[[s, a]];
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut next = mdp.n_states - 1;
        for t in 0..mdp.n_states {
            acc += mdp.transition[[s, a, t]];
            if u < acc {
                next = t;
                break;
            }
        }
        if mdp.hazard[next] {
            cost += 1.0;
        }
        s = next;
        if terminal(s) {
            break;
        }
    }
    (reward, cost)
}

/// Monte-Carlo evaluation of a tabular policy on the MDP.
pub fn monte_carlo_eval_mdp(
    mdp: &TabularMdp,
    policy: &[usize],
    episodes: usize,
    horizon: usize,
    terminal: impl Fn(usize) -> bool + Copy,
    seed: u64,
) -> EvalMetrics {
    monte_carlo_eval(episodes, seed, |ep_seed| {
        simulate_tabular_episode(mdp, policy, horizon, terminal, ep_seed)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array3};

    fn single_state_mdp(reward: f64, gamma: f64) -> TabularMdp {
        let mut transition = Array3::zeros((1, 1, 1));
        transition[[0, 0, 0]] = 1.0;
        TabularMdp {
            n_states: 1,
            n_actions: 1,
            transition,
            reward: Array2::from_elem((1, 1), reward),
            cost: Array2::zeros((1, 1)),
            hazard: vec![false],
            gamma,
            start: 0,
        }
    }

    #[test]
    fn value_iteration_geometric_series() {
        let mdp = single_state_mdp(1.0, 0.5);
        let sol = value_iteration(&mdp);
        assert!((sol.values[0] - 2.0).abs() < 1e-9);
        assert!(sol.residual < VI_RESIDUAL);
    }

    #[test]
    fn value_iteration_zero_rewards() {
        let mdp = single_state_mdp(0.0, 0.9);
        let sol = value_iteration(&mdp);
        assert_eq!(sol.values[0], 0.0);
    }

    #[test]
    fn reach_violation_base_cases() {
        // Two states: 0 safe absorbing, 1 hazard absorbing.
        let mut transition = Array3::zeros((2, 1, 2));
        transition[[0, 0, 0]] = 1.0;
        transition[[1, 0, 1]] = 1.0;
        let mdp = TabularMdp {
            n_states: 2,
            n_actions: 1,
            transition,
            reward: Array2::zeros((2, 1)),
            cost: Array2::zeros((2, 1)),
            hazard: vec![false, true],
            gamma: 0.99,
            start: 0,
        };
        let v = exact_reach_violation(&mdp, &[0, 0], 0.99);
        assert!((v[0] - 0.0).abs() < 1e-8);
        assert!((v[1] - 1.0).abs() < 1e-12);
        assert!(reach_violation_residual(&mdp, &[0, 0], 0.99, &v) < REACH_RESIDUAL);
    }

    #[test]
    fn reach_violation_one_step_expansion() {
        // 0 -> 1 (hazard, absorbing).
        let mut transition = Array3::zeros((2, 1, 2));
        transition[[0, 0, 1]] = 1.0;
        transition[[1, 0, 1]] = 1.0;
        let mdp = TabularMdp {
            n_states: 2,
            n_actions: 1,
            transition,
            reward: Array2::zeros((2, 1)),
            cost: Array2::zeros((2, 1)),
            hazard: vec![false, true],
            gamma: 0.99,
            start: 0,
        };
        let v = exact_reach_violation(&mdp, &[0, 0], 0.99);
        assert!((v[0] - 0.99).abs() < 1e-9);
    }

    #[test]
    fn enumerate_td_lambda_worked_instance() {
        let r = enumerate_td_lambda(&[1.0, 2.0], &[0.0, 10.0, 20.0], 0.5, 0.5);
        assert!((r[0] - 6.5).abs() < 1e-12);
        assert!((r[1] - 12.0).abs() < 1e-12);
        assert!((r[2] - 20.0).abs() < 1e-12);
    }

    #[test]
    fn enumerate_td_lambda_horizon_one_is_one_step() {
        for lambda in [0.0, 0.3, 1.0] {
            let r = enumerate_td_lambda(&[2.0], &[5.0, 7.0], 0.9, lambda);
            assert!((r[0] - (2.0 + 0.9 * 7.0)).abs() < 1e-12, "lambda {lambda}");
            assert_eq!(r[1], 7.0);
        }
    }

    #[test]
    fn enumerate_td_lambda_monte_carlo_collapse() {
        // lambda = 1, gamma = 1: partial reward sums plus terminal value.
        let r = enumerate_td_lambda(&[1.0, 2.0, 3.0], &[0.0, 0.0, 0.0, 4.0], 1.0, 1.0);
        assert!((r[0] - 10.0).abs() < 1e-12);
        assert!((r[1] - 9.0).abs() < 1e-12);
        assert!((r[2] - 7.0).abs() < 1e-12);
    }

    #[test]
    fn expectile_bisection_cases() {
        let xs = [1.0, 2.0, 3.0, 10.0];
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        assert!((expectile_bisection(&xs, 0.5) - mean).abs() < 1e-9);
        assert_eq!(expectile_bisection(&[3.3, 3.3, 3.3], 0.9), 3.3);
        assert!((expectile_bisection(&[0.0, 1.0], 0.8) - 0.8).abs() < 1e-9);
    }

    #[test]
    fn monte_carlo_eval_deterministic_zero_variance() {
        let mdp = single_state_mdp(1.0, 0.9);
        let m = monte_carlo_eval_mdp(&mdp, &[0], 10, 5, |_| false, 7);
        assert_eq!(m.reward, 5.0);
        assert_eq!(m.cost, 0.0);
    }
}

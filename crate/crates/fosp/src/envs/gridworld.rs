//! Slippery gridworld with hazard cells, a goal cell, and one-hot
//! observations. The desk-scale stand-in for the navigation tasks.

use super::{Action, ActionSpace, CmdpEnv, CmdpSpec, StepOutcome};
use crate::oracles::TabularMdp;
use crate::{FospError, Result};
use ndarray::{Array2, Array3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;
use std::collections::VecDeque;

pub const STEP_PENALTY: f64 = -0.01;
pub const GOAL_REWARD: f64 = 1.0;

/// Actions: 0 = up (y-1), 1 = down (y+1), 2 = left (x-1), 3 = right (x+1).
const MOVES: [(i64, i64); 4] = [(0, -1), (0, 1), (-1, 0), (1, 0)];

#[derive(Clone, Debug)]
pub struct GridworldCmdp {
    pub width: usize,
    pub height: usize,
    pub start: (usize, usize),
    pub goal: (usize, usize),
    pub hazards: BTreeSet<(usize, usize)>,
    pub slip_probability: f64,
    spec: CmdpSpec,
    pos: (usize, usize),
    steps: usize,
    done: bool,
    rng: ChaCha8Rng,
}

impl GridworldCmdp {
    pub fn new(
        width: usize,
        height: usize,
        start: (usize, usize),
        goal: (usize, usize),
        hazards: impl IntoIterator<Item = (usize, usize)>,
        slip_probability: f64,
        episode_horizon: usize,
        discount: f64,
    ) -> Result<GridworldCmdp> {
        let hazards: BTreeSet<(usize, usize)> = hazards.into_iter().collect();
        if width == 0 || height == 0 {
            return Err(FospError::InvalidArgument("grid dims must be positive".into()));
        }
        for &(x, y) in hazards.iter().chain([&start, &goal]) {
            if x >= width || y >= height {
                return Err(FospError::InvalidArgument(format!("cell ({x},{y}) out of bounds")));
            }
        }
        if hazards.contains(&start) || hazards.contains(&goal) {
            return Err(FospError::InvalidArgument("start/goal must not be hazards".into()));
        }
        if !(0.0..1.0).contains(&slip_probability) {
            return Err(FospError::InvalidArgument("slip must be in [0,1)".into()));
        }
        // A hazard-free path start -> goal must exist so a feasible policy exists.
        let mut seen = vec![false; width * height];
        let mut queue = VecDeque::from([start]);
        seen[start.1 * width + start.0] = true;
        let mut reachable = false;
        while let Some((x, y)) = queue.pop_front() {
            if (x, y) == goal {
                reachable = true;
                break;
            }
            for (dx, dy) in MOVES {
                let nx = x as i64 + dx;
                let ny = y as i64 + dy;
                if nx < 0 || ny < 0 || nx as usize >= width || ny as usize >= height {
                    continue;
                }
                let n = (nx as usize, ny as usize);
                let idx = n.1 * width + n.0;
                if !seen[idx] && !hazards.contains(&n) {
                    seen[idx] = true;
                    queue.push_back(n);
                }
            }
        }
        if !reachable {
            return Err(FospError::Infeasible(
                "no hazard-free path from start to goal".into(),
            ));
        }
        let spec = CmdpSpec {
            obs_dim: width * height,
            action_space: ActionSpace::Discrete(4),
            cost_threshold: 0.0,
            discount,
            episode_horizon,
        };
        spec.validate()?;
        Ok(GridworldCmdp {
            width,
            height,
            start,
            goal,
            hazards,
            slip_probability,
            spec,
            pos: start,
            steps: 0,
            done: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        })
    }

    /// 5x5 grid with a hazard wall on column 2 (rows 0..=3) and the only
    /// safe crossing at (2,4); the 4-step direct path crosses a hazard, the
    /// shortest safe path takes 8 steps.
    pub fn wall_gap_5x5(slip: f64, horizon: usize, discount: f64) -> GridworldCmdp {
        GridworldCmdp::new(
            5,
            5,
            (0, 2),
            (4, 2),
            [(2, 0), (2, 1), (2, 2), (2, 3)],
            slip,
            horizon,
            discount,
        )
        .expect("shipped grid is valid")
    }

    /// Same layout with the gap moved to (2,0): hazards occupy cells that
    /// are safe in [`GridworldCmdp::wall_gap_5x5`] and vice versa.
    pub fn wall_gap_5x5_shifted(slip: f64, horizon: usize, discount: f64) -> GridworldCmdp {
        GridworldCmdp::new(
            5,
            5,
            (0, 2),
            (4, 2),
            [(2, 1), (2, 2), (2, 3), (2, 4)],
            slip,
            horizon,
            discount,
        )
        .expect("shipped grid is valid")
    }

    /// Empty 3x3 grid, start in one corner, goal in the opposite one.
    pub fn open_3x3(discount: f64) -> GridworldCmdp {
        GridworldCmdp::new(3, 3, (0, 0), (2, 2), [], 0.0, 100, discount).expect("shipped grid is valid")
    }

    pub fn cell_index(&self, cell: (usize, usize)) -> usize {
        cell.1 * self.width + cell.0
    }

    pub fn n_states(&self) -> usize {
        self.width * self.height
    }

    pub fn observation_of(&self, cell: (usize, usize)) -> Vec<f64> {
        let mut obs = vec![0.0; self.n_states()];
        obs[self.cell_index(cell)] = 1.0;
        obs
    }

    /// Inverse of the one-hot observation encoding.
    pub fn state_of_observation(&self, obs: &[f64]) -> usize {
        obs.iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite obs"))
            .map(|(i, _)| i)
            .unwrap_or(0)
    }

    fn apply_move(&self, from: (usize, usize), dir: usize) -> (usize, usize) {
        let (dx, dy) = MOVES[dir];
        let nx = from.0 as i64 + dx;
        let ny = from.1 as i64 + dy;
        if nx < 0 || ny < 0 || nx as usize >= self.width || ny as usize >= self.height {
            from
        } else {
            (nx as usize, ny as usize)
        }
    }

    /// Perpendicular slip directions for an intended move.
    fn slip_dirs(dir: usize) -> [usize; 2] {
        if dir < 2 {
            [2, 3]
        } else {
            [0, 1]
        }
    }

    /// Exact tabular form: transition tensor, reward and cost tables, hazard
    /// indicator. The goal cell is absorbing with zero reward.
    pub fn export_tabular(&self) -> TabularMdp {
        let n = self.n_states();
        let mut transition = Array3::zeros((n, 4, n));
        let mut reward = Array2::zeros((n, 4));
        let mut cost = Array2::zeros((n, 4));
        let mut hazard = vec![false; n];
        for &h in &self.hazards {
            hazard[self.cell_index(h)] = true;
        }
        for y in 0..self.height {
            for x in 0..self.width {
                let s = self.cell_index((x, y));
                if (x, y) == self.goal {
                    for a in 0..4 {
                        transition[[s, a, s]] = 1.0;
                    }
                    continue;
                }
                for a in 0..4 {
                    let mut push = |dir: usize, p: f64| {
                        let next = self.apply_move((x, y), dir);
                        let t = self.cell_index(next);
                        transition[[s, a, t]] += p;
                        reward[[s, a]] +=
                            p * (STEP_PENALTY + if next == self.goal { GOAL_REWARD } else { 0.0 });
                        if self.hazards.contains(&next) {
                            cost[[s, a]] += p;
                        }
                    };
                    push(a, 1.0 - self.slip_probability);
                    for d in Self::slip_dirs(a) {
                        push(d, self.slip_probability / 2.0);
                    }
                }
            }
        }
        TabularMdp {
            n_states: n,
            n_actions: 4,
            transition,
            reward,
            cost,
            hazard,
            gamma: self.spec.discount,
            start: self.cell_index(self.start),
        }
    }
}

impl CmdpEnv for GridworldCmdp {
    fn spec(&self) -> &CmdpSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.pos = self.start;
        self.steps = 0;
        self.done = false;
        self.observation_of(self.pos)
    }

    fn step(&mut self, action: &Action) -> Result<StepOutcome> {
        let dir = match action {
            Action::Discrete(d) if *d < 4 => *d,
            Action::Discrete(d) => {
                return Err(FospError::InvalidArgument(format!("action {d} out of bounds")))
            }
            Action::Continuous(_) => {
                return Err(FospError::InvalidArgument(
                    "gridworld takes discrete actions".into(),
                ))
            }
        };
        if self.done {
            return Err(FospError::InvalidArgument("step after terminal".into()));
        }
        super::record_interaction();
        let actual = if self.slip_probability > 0.0 {
            let u: f64 = self.rng.random();
            if u < self.slip_probability {
                let side = Self::slip_dirs(dir)[if u < self.slip_probability / 2.0 { 0 } else { 1 }];
                side
            } else {
                dir
            }
        } else {
            dir
        };
        let next = self.apply_move(self.pos, actual);
        self.pos = next;
        self.steps += 1;
        let cost = if self.hazards.contains(&next) { 1.0 } else { 0.0 };
        let mut reward = STEP_PENALTY;
        let mut terminal = false;
        if next == self.goal {
            reward += GOAL_REWARD;
            terminal = true;
        }
        if self.steps >= self.spec.episode_horizon {
            terminal = true;
        }
        self.done = terminal;
        Ok(StepOutcome {
            observation: self.observation_of(next),
            reward,
            cost,
            terminal,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles;

    #[test]
    fn reset_is_deterministic_and_starts_at_start() {
        let mut env = GridworldCmdp::wall_gap_5x5(0.2, 100, 0.997);
        let a = env.reset(42);
        let b = env.reset(42);
        assert_eq!(a, b);
        assert_eq!(a[env.cell_index((0, 2))], 1.0);
        assert_eq!(a.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn moving_into_hazard_costs_one() {
        let mut env = GridworldCmdp::wall_gap_5x5(0.0, 100, 0.997);
        env.reset(0);
        env.step(&Action::Discrete(3)).unwrap(); // (1,2)
        let out = env.step(&Action::Discrete(3)).unwrap(); // (2,2) hazard
        assert_eq!(out.cost, 1.0);
        assert!(!out.terminal);
    }

    #[test]
    fn moving_into_wall_stays_put_with_zero_cost() {
        let mut env = GridworldCmdp::wall_gap_5x5(0.0, 100, 0.997);
        let start = env.reset(0);
        let out = env.step(&Action::Discrete(2)).unwrap(); // left from x=0
        assert_eq!(out.observation, start);
        assert_eq!(out.cost, 0.0);
    }

    #[test]
    fn reaching_goal_rewards_and_terminates() {
        let mut env = GridworldCmdp::wall_gap_5x5(0.0, 100, 0.997);
        env.reset(0);
        for _ in 0..3 {
            env.step(&Action::Discrete(3)).unwrap();
        }
        let out = env.step(&Action::Discrete(3)).unwrap(); // arrive (4,2)
        assert!((out.reward - (GOAL_REWARD + STEP_PENALTY)).abs() < 1e-12);
        assert!(out.terminal);
        assert!(env.step(&Action::Discrete(0)).is_err());
    }

    #[test]
    fn out_of_bounds_action_is_rejected() {
        let mut env = GridworldCmdp::open_3x3(0.997);
        env.reset(0);
        assert!(env.step(&Action::Discrete(4)).is_err());
    }

    #[test]
    fn construction_rejects_blocked_goal() {
        // Goal fully walled off by hazards.
        let r = GridworldCmdp::new(
            3,
            3,
            (0, 0),
            (2, 2),
            [(1, 2), (2, 1)],
            0.0,
            50,
            0.99,
        );
        assert!(matches!(r, Err(crate::FospError::Infeasible(_))));
    }

    #[test]
    fn export_tabular_rows_sum_to_one() {
        for slip in [0.0, 0.2] {
            let env = GridworldCmdp::open_3x3(0.997);
            let env = GridworldCmdp::new(
                env.width, env.height, env.start, env.goal, [], slip, 100, 0.997,
            )
            .unwrap();
            let mdp = env.export_tabular();
            mdp.validate().unwrap();
        }
    }

    #[test]
    fn export_tabular_slip_zero_is_deterministic() {
        let env = GridworldCmdp::wall_gap_5x5(0.0, 100, 0.997);
        let mdp = env.export_tabular();
        for v in mdp.transition.iter() {
            assert!(*v == 0.0 || *v == 1.0);
        }
    }

    #[test]
    fn export_tabular_intended_mass_with_slip() {
        let env = GridworldCmdp::new(5, 5, (0, 2), (4, 2), [], 0.2, 100, 0.997).unwrap();
        let mdp = env.export_tabular();
        // Interior cell (2,2): moving right lands at (3,2) with mass 0.8.
        let s = env.cell_index((2, 2));
        let t = env.cell_index((3, 2));
        assert!((mdp.transition[[s, 3, t]] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn slip_zero_dynamics_round_trip_through_simulation() {
        let mut env = GridworldCmdp::wall_gap_5x5(0.0, 10_000, 0.997);
        let mdp = env.export_tabular();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let mut obs = env.reset(1);
        let mut state = env.state_of_observation(&obs);
        for _ in 0..10_000 {
            if state == env.cell_index(env.goal) {
                obs = env.reset(rng.random::<u64>());
                state = env.state_of_observation(&obs);
            }
            let a = rng.random_range(0..4usize);
            let out = env.step(&Action::Discrete(a)).unwrap();
            let next = env.state_of_observation(&out.observation);
            assert_eq!(mdp.transition[[state, a, next]], 1.0);
            if out.terminal {
                obs = env.reset(rng.random::<u64>());
                state = env.state_of_observation(&obs);
            } else {
                state = next;
            }
        }
    }

    #[test]
    fn episode_cost_equals_hazard_occupancy_count() {
        let mut env = GridworldCmdp::wall_gap_5x5(0.0, 100, 0.997);
        env.reset(0);
        let mut total_cost = 0.0;
        let mut occupancy = 0;
        // Walk right along the hazard row then bump the wall a few times.
        for a in [3usize, 3, 0, 1, 3, 3] {
            let out = env.step(&Action::Discrete(a)).unwrap();
            total_cost += out.cost;
            let s = env.state_of_observation(&out.observation);
            let cell = (s % env.width, s / env.width);
            if env.hazards.contains(&cell) {
                occupancy += 1;
            }
            if out.terminal {
                break;
            }
        }
        assert_eq!(total_cost, occupancy as f64);
    }

    #[test]
    fn shipped_grids_admit_zero_cost_goal_reaching_policies() {
        for env in [
            GridworldCmdp::wall_gap_5x5(0.0, 100, 0.997),
            GridworldCmdp::wall_gap_5x5_shifted(0.0, 100, 0.997),
            GridworldCmdp::open_3x3(0.997),
        ] {
            let mdp = env.export_tabular();
            let sol = oracles::constrained_value_iteration(&mdp).unwrap();
            let goal = env.cell_index(env.goal);
            let m = oracles::monte_carlo_eval_mdp(&mdp, &sol.policy, 200, 100, |s| s == goal, 11);
            assert_eq!(m.cost, 0.0);
            assert!(m.reward > 0.0, "policy reaches the goal");
        }
    }

    #[test]
    fn greedy_policy_on_open_grid_takes_manhattan_paths() {
        let env = GridworldCmdp::open_3x3(0.997);
        let mdp = env.export_tabular();
        let sol = oracles::value_iteration(&mdp);
        let goal = env.cell_index(env.goal);
        for y in 0..3 {
            for x in 0..3 {
                let mut s = env.cell_index((x, y));
                let dist = (2 - x) + (2 - y);
                let mut steps = 0;
                while s != goal {
                    let a = sol.policy[s];
                    let next = (0..9).find(|&t| mdp.transition[[s, a, t]] == 1.0).unwrap();
                    assert_ne!(next, s, "greedy policy must not stall");
                    s = next;
                    steps += 1;
                    assert!(steps <= 4);
                }
                assert_eq!(steps, dist, "cell ({x},{y})");
            }
        }
    }

    #[test]
    fn constrained_vi_wall_grid_is_strictly_worse_than_unconstrained() {
        let env = GridworldCmdp::wall_gap_5x5(0.0, 100, 0.997);
        let mdp = env.export_tabular();
        let free = oracles::value_iteration(&mdp);
        let safe = oracles::constrained_value_iteration(&mdp).unwrap();
        let s0 = mdp.start;
        assert!(safe.values[s0] < free.values[s0]);
        for s in 0..mdp.n_states {
            assert!(safe.values[s] <= free.values[s] + 1e-9);
        }
    }

    #[test]
    fn constrained_vi_matches_unconstrained_without_hazards() {
        let env = GridworldCmdp::open_3x3(0.997);
        let mdp = env.export_tabular();
        let free = oracles::value_iteration(&mdp);
        let safe = oracles::constrained_value_iteration(&mdp).unwrap();
        for s in 0..mdp.n_states {
            assert!((safe.values[s] - free.values[s]).abs() < 1e-9);
        }
    }

    #[test]
    fn feasible_set_matches_zero_reach_violation_states() {
        let env = GridworldCmdp::wall_gap_5x5(0.0, 100, 0.997);
        let mdp = env.export_tabular();
        let sol = oracles::constrained_value_iteration(&mdp).unwrap();
        let v = oracles::exact_reach_violation(&mdp, &sol.policy, 0.99);
        for s in 0..mdp.n_states {
            if sol.feasible[s] {
                assert!(v[s] < 1e-9, "feasible state {s} has v {}", v[s]);
            } else {
                assert!(v[s] > 0.0, "infeasible state {s} has v 0");
            }
        }
    }

    use rand::{Rng, SeedableRng};
}

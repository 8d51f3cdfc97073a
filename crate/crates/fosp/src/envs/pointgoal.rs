//! Continuous point-mass navigation: reach a goal disc while avoiding
//! hazard discs, observing the relative goal vector plus hazard-range bins.

use super::{Action, ActionSpace, CmdpEnv, CmdpSpec, StepOutcome};
use crate::{FospError, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const DT: f64 = 0.1;

#[derive(Clone, Copy, Debug)]
pub struct Disc {
    pub center: (f64, f64),
    pub radius: f64,
}

#[derive(Clone, Debug)]
pub struct PointGoalCmdp {
    pub arena: f64,
    pub start: (f64, f64),
    pub goal: Disc,
    pub hazards: Vec<Disc>,
    pub lidar_bins: usize,
    pub lidar_range: f64,
    pub max_speed: f64,
    spec: CmdpSpec,
    pos: (f64, f64),
    vel: (f64, f64),
    steps: usize,
    done: bool,
    #[allow(dead_code)]
    rng: ChaCha8Rng,
}

impl PointGoalCmdp {
    pub fn new(
        arena: f64,
        start: (f64, f64),
        goal: Disc,
        hazards: Vec<Disc>,
        lidar_bins: usize,
        max_speed: f64,
        episode_horizon: usize,
        discount: f64,
    ) -> Result<PointGoalCmdp> {
        let inside = |d: &Disc| {
            d.center.0 - d.radius >= 0.0
                && d.center.1 - d.radius >= 0.0
                && d.center.0 + d.radius <= arena
                && d.center.1 + d.radius <= arena
        };
        if !inside(&goal) || !hazards.iter().all(inside) {
            return Err(FospError::InvalidArgument(
                "goal and hazards must lie inside the arena".into(),
            ));
        }
        if lidar_bins == 0 {
            return Err(FospError::InvalidArgument("need at least one lidar bin".into()));
        }
        let spec = CmdpSpec {
            obs_dim: 2 + lidar_bins,
            action_space: ActionSpace::Box {
                dim: 2,
                low: -1.0,
                high: 1.0,
            },
            cost_threshold: 0.0,
            discount,
            episode_horizon,
        };
        spec.validate()?;
        Ok(PointGoalCmdp {
            arena,
            start,
            goal,
            hazards,
            lidar_bins,
            lidar_range: arena / 2.0,
            max_speed,
            spec,
            pos: start,
            vel: (0.0, 0.0),
            steps: 0,
            done: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        })
    }

    /// Default task: one hazard disc between start and goal.
    pub fn standard(discount: f64) -> PointGoalCmdp {
        PointGoalCmdp::new(
            3.0,
            (0.5, 0.5),
            Disc {
                center: (2.5, 2.5),
                radius: 0.3,
            },
            vec![Disc {
                center: (1.5, 1.5),
                radius: 0.4,
            }],
            8,
            1.0,
            200,
            discount,
        )
        .expect("shipped task is valid")
    }

    fn goal_distance(&self, p: (f64, f64)) -> f64 {
        ((p.0 - self.goal.center.0).powi(2) + (p.1 - self.goal.center.1).powi(2)).sqrt()
    }

    fn in_hazard(&self, p: (f64, f64)) -> bool {
        self.hazards.iter().any(|h| {
            let d2 = (p.0 - h.center.0).powi(2) + (p.1 - h.center.1).powi(2);
            d2 <= h.radius * h.radius
        })
    }

    pub fn observation(&self) -> Vec<f64> {
        let mut obs = Vec::with_capacity(self.spec.obs_dim);
        obs.push((self.goal.center.0 - self.pos.0) / self.arena);
        obs.push((self.goal.center.1 - self.pos.1) / self.arena);
        // Hazard closeness per angular bin, 1 at contact and 0 beyond range.
        for b in 0..self.lidar_bins {
            let lo = (b as f64) * std::f64::consts::TAU / self.lidar_bins as f64;
            let hi = lo + std::f64::consts::TAU / self.lidar_bins as f64;
            let mut reading: f64 = 0.0;
            for h in &self.hazards {
                let dx = h.center.0 - self.pos.0;
                let dy = h.center.1 - self.pos.1;
                let mut ang = dy.atan2(dx);
                if ang < 0.0 {
                    ang += std::f64::consts::TAU;
                }
                if ang >= lo && ang < hi {
                    let dist = (dx * dx + dy * dy).sqrt() - h.radius;
                    let closeness = (1.0 - dist.max(0.0) / self.lidar_range).clamp(0.0, 1.0);
                    reading = reading.max(closeness);
                }
            }
            obs.push(reading);
        }
        obs
    }
}

impl CmdpEnv for PointGoalCmdp {
    fn spec(&self) -> &CmdpSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.pos = self.start;
        self.vel = (0.0, 0.0);
        self.steps = 0;
        self.done = false;
        self.observation()
    }

    fn step(&mut self, action: &Action) -> Result<StepOutcome> {
        let accel = match action {
            Action::Continuous(v) if v.len() == 2 => {
                if v.iter().any(|a| !a.is_finite() || a.abs() > 1.0 + 1e-9) {
                    return Err(FospError::InvalidArgument(format!(
                        "acceleration {v:?} outside [-1,1]^2"
                    )));
                }
                (v[0], v[1])
            }
            _ => {
                return Err(FospError::InvalidArgument(
                    "point-goal takes 2-d continuous actions".into(),
                ))
            }
        };
        if self.done {
            return Err(FospError::InvalidArgument("step after terminal".into()));
        }
        super::record_interaction();
        let prev_dist = self.goal_distance(self.pos);
        self.vel.0 += accel.0 * DT;
        self.vel.1 += accel.1 * DT;
        let speed = (self.vel.0 * self.vel.0 + self.vel.1 * self.vel.1).sqrt();
        if speed > self.max_speed {
            let scale = self.max_speed / speed;
            self.vel.0 *= scale;
            self.vel.1 *= scale;
        }
        self.pos.0 = (self.pos.0 + self.vel.0 * DT).clamp(0.0, self.arena);
        self.pos.1 = (self.pos.1 + self.vel.1 * DT).clamp(0.0, self.arena);
        self.steps += 1;

        let new_dist = self.goal_distance(self.pos);
        let mut reward = prev_dist - new_dist;
        let cost = if self.in_hazard(self.pos) { 1.0 } else { 0.0 };
        let mut terminal = false;
        if new_dist <= self.goal.radius {
            reward += 1.0;
            terminal = true;
        }
        if self.steps >= self.spec.episode_horizon {
            terminal = true;
        }
        self.done = terminal;
        Ok(StepOutcome {
            observation: self.observation(),
            reward,
            cost,
            terminal,
        })
    }
}

//! Desk-scale constrained-MDP environments plus scripted behavior policies
//! for dataset generation.

mod behavior;
mod gridworld;
mod pointgoal;

pub use behavior::{behavior_action, BehaviorKind, BehaviorPolicy};
pub use gridworld::GridworldCmdp;
pub use pointgoal::PointGoalCmdp;

use crate::{FospError, Result};
use std::sync::atomic::{AtomicU64, Ordering};

/// Process-wide count of environment interactions. The offline phase must
/// leave this untouched; tests assert it by snapshot difference.
static ENV_INTERACTIONS: AtomicU64 = AtomicU64::new(0);

pub fn interaction_count() -> u64 {
    ENV_INTERACTIONS.load(Ordering::Relaxed)
}

pub(crate) fn record_interaction() {
    ENV_INTERACTIONS.fetch_add(1, Ordering::Relaxed);
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ActionSpace {
    Discrete(usize),
    Box { dim: usize, low: f64, high: f64 },
}

impl ActionSpace {
    /// Width of the encoded action vector (one-hot for discrete).
    pub fn encoded_dim(&self) -> usize {
        match *self {
            ActionSpace::Discrete(k) => k,
            ActionSpace::Box { dim, .. } => dim,
        }
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self, ActionSpace::Discrete(_))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

impl Action {
    /// Flat encoding used by trajectories and the world model: one-hot for
    /// discrete actions, raw components for continuous ones.
    pub fn encode(&self, space: &ActionSpace) -> Vec<f64> {
        match (self, space) {
            (Action::Discrete(i), ActionSpace::Discrete(k)) => {
                let mut v = vec![0.0; *k];
                v[*i] = 1.0;
                v
            }
            (Action::Continuous(v), ActionSpace::Box { .. }) => v.clone(),
            _ => panic!("action does not match action space"),
        }
    }
}

/// CMDP descriptor: spaces, cost threshold d, discount, horizon.
#[derive(Clone, Debug)]
pub struct CmdpSpec {
    pub obs_dim: usize,
    pub action_space: ActionSpace,
    pub cost_threshold: f64,
    pub discount: f64,
    pub episode_horizon: usize,
}

impl CmdpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.cost_threshold < 0.0 {
            return Err(FospError::InvalidArgument("cost threshold d must be >= 0".into()));
        }
        if !(0.0 < self.discount && self.discount < 1.0) {
            return Err(FospError::InvalidArgument("discount must be in (0,1)".into()));
        }
        if self.episode_horizon < 1 {
            return Err(FospError::InvalidArgument("episode horizon must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub cost: f64,
    pub terminal: bool,
}

pub trait CmdpEnv {
    fn spec(&self) -> &CmdpSpec;
    fn reset(&mut self, seed: u64) -> Vec<f64>;
    fn step(&mut self, action: &Action) -> Result<StepOutcome>;
}

/// One environment transition as stored in trajectories: the observation at
/// time t, the action that led to it (zero at episode start), and the reward
/// and cost received on arrival.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryStep {
    pub observation: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub cost: f64,
    pub is_first: bool,
    pub is_terminal: bool,
}

/// A full episode plus the id of the behavior that generated it.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<TrajectoryStep>,
    pub behavior: u8,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn reward_return(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    pub fn cost_return(&self) -> f64 {
        self.steps.iter().map(|s| s.cost).sum()
    }
}

/// The concrete environments the trainer can instantiate.
pub enum EnvInstance {
    Grid(GridworldCmdp),
    Point(PointGoalCmdp),
}

impl CmdpEnv for EnvInstance {
    fn spec(&self) -> &CmdpSpec {
        match self {
            EnvInstance::Grid(e) => e.spec(),
            EnvInstance::Point(e) => e.spec(),
        }
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        match self {
            EnvInstance::Grid(e) => e.reset(seed),
            EnvInstance::Point(e) => e.reset(seed),
        }
    }

    fn step(&mut self, action: &Action) -> Result<StepOutcome> {
        match self {
            EnvInstance::Grid(e) => e.step(action),
            EnvInstance::Point(e) => e.step(action),
        }
    }
}

/// Runs one full episode under `select`, recording the trajectory in the
/// arrival convention (step 0 carries zero action/reward).
pub fn rollout_episode<E, F>(env: &mut E, seed: u64, behavior: u8, mut select: F) -> Result<Trajectory>
where
    E: CmdpEnv + ?Sized,
    F: FnMut(&[f64], usize) -> Action,
{
    let spec = env.spec().clone();
    let act_dim = spec.action_space.encoded_dim();
    let mut steps = Vec::new();
    let mut obs = env.reset(seed);
    steps.push(TrajectoryStep {
        observation: obs.clone(),
        action: vec![0.0; act_dim],
        reward: 0.0,
        cost: 0.0,
        is_first: true,
        is_terminal: false,
    });
    for t in 0..spec.episode_horizon {
        let action = select(&obs, t);
        let out = env.step(&action)?;
        let terminal = out.terminal || t + 1 == spec.episode_horizon;
        steps.push(TrajectoryStep {
            observation: out.observation.clone(),
            action: action.encode(&spec.action_space),
            reward: out.reward,
            cost: out.cost,
            is_first: false,
            is_terminal: terminal,
        });
        obs = out.observation;
        if terminal {
            break;
        }
    }
    Ok(Trajectory { steps, behavior })
}

//! Scripted behavior policies for dataset generation: random, safe
//! (epsilon-greedy around the constrained-optimal policy) and unsafe
//! (epsilon-greedy around the unconstrained-optimal policy).

use super::{Action, ActionSpace, CmdpEnv, EnvInstance};
use crate::oracles::{constrained_value_iteration, value_iteration};
use crate::Result;
use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BehaviorKind {
    Random,
    Safe,
    Unsafe,
}

impl BehaviorKind {
    pub fn id(&self) -> u8 {
        match self {
            BehaviorKind::Random => 0,
            BehaviorKind::Safe => 1,
            BehaviorKind::Unsafe => 2,
        }
    }
}

/// A ready-to-act behavior. On the gridworld the safe/unsafe target policies
/// are solved once at construction from the oracle tables; observations are
/// one-hot, so acting needs no further env access.
#[derive(Clone, Debug)]
pub struct BehaviorPolicy {
    pub kind: BehaviorKind,
    pub epsilon: f64,
    space: ActionSpace,
    tabular: Option<Vec<usize>>,
}

impl BehaviorPolicy {
    pub fn new(kind: BehaviorKind, env: &EnvInstance, epsilon: f64) -> Result<BehaviorPolicy> {
        let space = env.spec().action_space;
        let tabular = match (kind, env) {
            (BehaviorKind::Random, _) | (_, EnvInstance::Point(_)) => None,
            (BehaviorKind::Safe, EnvInstance::Grid(g)) => {
                Some(constrained_value_iteration(&g.export_tabular())?.policy)
            }
            (BehaviorKind::Unsafe, EnvInstance::Grid(g)) => {
                Some(value_iteration(&g.export_tabular()).policy)
            }
        };
        Ok(BehaviorPolicy {
            kind,
            epsilon,
            space,
            tabular,
        })
    }

    pub fn action(&self, observation: &[f64], rng: &mut impl Rng) -> Action {
        behavior_action(self, observation, rng)
    }
}

/// Selects one action. The random kind is uniform over the action space;
/// safe/unsafe kinds are epsilon-greedy around their oracle policy on the
/// gridworld and scripted controllers on point-goal.
pub fn behavior_action(policy: &BehaviorPolicy, observation: &[f64], rng: &mut impl Rng) -> Action {
    match policy.kind {
        BehaviorKind::Random => random_action(&policy.space, rng),
        BehaviorKind::Safe | BehaviorKind::Unsafe => {
            if policy.epsilon > 0.0 && rng.random::<f64>() < policy.epsilon {
                return random_action(&policy.space, rng);
            }
            match &policy.tabular {
                Some(table) => {
                    // One-hot observation: the state index is the argmax.
                    let state = observation
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite obs"))
                        .map(|(i, _)| i)
                        .unwrap_or(0);
                    Action::Discrete(table[state])
                }
                None => point_controller(observation, policy.kind == BehaviorKind::Safe),
            }
        }
    }
}

fn random_action(space: &ActionSpace, rng: &mut impl Rng) -> Action {
    match *space {
        ActionSpace::Discrete(k) => Action::Discrete(rng.random_range(0..k)),
        ActionSpace::Box { dim, low, high } => {
            Action::Continuous((0..dim).map(|_| rng.random_range(low..high)).collect())
        }
    }
}

/// Proportional controller toward the goal; the safe variant steers away
/// from whatever the hazard-range bins report as close.
fn point_controller(observation: &[f64], safe: bool) -> Action {
    let gx = observation[0];
    let gy = observation[1];
    let norm = (gx * gx + gy * gy).sqrt().max(1e-6);
    let mut ax = gx / norm;
    let mut ay = gy / norm;
    if safe {
        let bins = &observation[2..];
        let n = bins.len();
        for (b, &reading) in bins.iter().enumerate() {
            if reading > 0.4 {
                let ang = (b as f64 + 0.5) * std::f64::consts::TAU / n as f64;
                ax -= 1.5 * reading * ang.cos();
                ay -= 1.5 * reading * ang.sin();
            }
        }
    }
    Action::Continuous(vec![ax.clamp(-1.0, 1.0), ay.clamp(-1.0, 1.0)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{rollout_episode, GridworldCmdp};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid_env() -> EnvInstance {
        EnvInstance::Grid(GridworldCmdp::wall_gap_5x5(0.0, 100, 0.997))
    }

    #[test]
    fn random_kind_is_uniform_over_actions() {
        let env = grid_env();
        let policy = BehaviorPolicy::new(BehaviorKind::Random, &env, 0.0).unwrap();
        let obs = vec![0.0; 25];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut counts = [0usize; 4];
        for _ in 0..10_000 {
            if let Action::Discrete(a) = policy.action(&obs, &mut rng) {
                counts[a] += 1;
            }
        }
        for c in counts {
            let freq = c as f64 / 10_000.0;
            assert!((freq - 0.25).abs() < 0.02, "freq {freq}");
        }
    }

    #[test]
    fn safe_policy_with_zero_epsilon_has_zero_episode_cost() {
        let mut env = grid_env();
        let policy = BehaviorPolicy::new(BehaviorKind::Safe, &env, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let traj = rollout_episode(&mut env, 3, policy.kind.id(), |obs, _| {
            policy.action(obs, &mut rng)
        })
        .unwrap();
        assert_eq!(traj.cost_return(), 0.0);
        assert!(traj.steps.last().unwrap().is_terminal);
        assert!(traj.reward_return() > 0.9, "{}", traj.reward_return());
    }

    #[test]
    fn unsafe_policy_return_at_least_safe_return_on_wall_grid() {
        let run = |kind: BehaviorKind| {
            let mut env = grid_env();
            let policy = BehaviorPolicy::new(kind, &env, 0.0).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            rollout_episode(&mut env, 5, kind.id(), |obs, _| policy.action(obs, &mut rng)).unwrap()
        };
        let safe = run(BehaviorKind::Safe);
        let unsafe_t = run(BehaviorKind::Unsafe);
        assert!(unsafe_t.reward_return() >= safe.reward_return());
        assert!(unsafe_t.cost_return() > 0.0, "direct path crosses the wall");
    }

    #[test]
    fn point_goal_lidar_bins_in_unit_interval() {
        use crate::envs::CmdpEnv;
        let mut env = crate::envs::PointGoalCmdp::standard(0.997);
        let obs = env.reset(0);
        assert!(obs[2..].iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

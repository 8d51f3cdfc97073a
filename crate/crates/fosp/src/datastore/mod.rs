//! Offline dataset construction (1:1:1 behavior mixture), persistent
//! trajectory storage, and sequence-batch sampling shared by offline
//! training and the online replay buffer.
//!
//! On-disk payloads are float32; training converts to f64 at load.

use crate::envs::{
    rollout_episode, ActionSpace, BehaviorKind, BehaviorPolicy, CmdpEnv, EnvInstance, Trajectory,
    TrajectoryStep,
};
use crate::{FospError, Result};
use ndarray::{Array2, Array3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"FOSPDATA";
pub const VERSION: u16 = 1;

const ACTION_KIND_DISCRETE: u8 = 0;
const ACTION_KIND_CONTINUOUS: u8 = 1;

/// Serialized trajectory dataset: header (magic, version, dims, action-kind
/// flag) followed by length-prefixed step records.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryFile {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub discrete_actions: bool,
    pub trajectories: Vec<Trajectory>,
}

impl TrajectoryFile {
    pub fn new(obs_dim: usize, act_dim: usize, discrete_actions: bool) -> TrajectoryFile {
        TrajectoryFile {
            obs_dim,
            act_dim,
            discrete_actions,
            trajectories: Vec::new(),
        }
    }

    pub fn for_env(env: &EnvInstance) -> TrajectoryFile {
        let spec = env.spec();
        TrajectoryFile::new(
            spec.obs_dim,
            spec.action_space.encoded_dim(),
            spec.action_space.is_discrete(),
        )
    }

    pub fn push(&mut self, traj: Trajectory) -> Result<()> {
        if traj.is_empty() || !traj.steps[0].is_first {
            return Err(FospError::InvalidArgument(
                "trajectory must start with is_first".into(),
            ));
        }
        for s in &traj.steps {
            if s.observation.len() != self.obs_dim || s.action.len() != self.act_dim {
                return Err(FospError::shape(
                    "trajectory step",
                    format!("obs {} act {}", self.obs_dim, self.act_dim),
                    format!("obs {} act {}", s.observation.len(), s.action.len()),
                ));
            }
        }
        self.trajectories.push(traj);
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.obs_dim as u32).to_le_bytes())?;
        w.write_all(&(self.act_dim as u32).to_le_bytes())?;
        w.write_all(&[if self.discrete_actions {
            ACTION_KIND_DISCRETE
        } else {
            ACTION_KIND_CONTINUOUS
        }])?;
        for traj in &self.trajectories {
            w.write_all(&(traj.steps.len() as u32).to_le_bytes())?;
            w.write_all(&[traj.behavior])?;
            for s in &traj.steps {
                for v in &s.observation {
                    w.write_all(&(*v as f32).to_le_bytes())?;
                }
                for v in &s.action {
                    w.write_all(&(*v as f32).to_le_bytes())?;
                }
                w.write_all(&(s.reward as f32).to_le_bytes())?;
                w.write_all(&(s.cost as f32).to_le_bytes())?;
                let flags = (s.is_first as u8) | ((s.is_terminal as u8) << 1);
                w.write_all(&[flags])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<TrajectoryFile> {
        let mut r = Reader {
            inner: BufReader::new(File::open(path)?),
            offset: 0,
        };
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(FospError::Format {
                offset: 0,
                detail: format!("bad magic {:?}, expected FOSPDATA", String::from_utf8_lossy(&magic)),
            });
        }
        let version = r.read_u16()?;
        if version != VERSION {
            return Err(FospError::Format {
                offset: 8,
                detail: format!("unsupported dataset version {version}"),
            });
        }
        let obs_dim = r.read_u32()? as usize;
        let act_dim = r.read_u32()? as usize;
        let kind = r.read_u8()?;
        let discrete_actions = match kind {
            ACTION_KIND_DISCRETE => true,
            ACTION_KIND_CONTINUOUS => false,
            other => {
                return Err(FospError::Format {
                    offset: r.offset - 1,
                    detail: format!("unknown action kind {other}"),
                })
            }
        };
        let mut file = TrajectoryFile::new(obs_dim, act_dim, discrete_actions);
        loop {
            let len = match r.try_read_u32()? {
                Some(v) => v as usize,
                None => break,
            };
            let behavior = r.read_u8()?;
            let mut steps = Vec::with_capacity(len);
            for i in 0..len {
                let mut observation = Vec::with_capacity(obs_dim);
                for _ in 0..obs_dim {
                    observation.push(r.read_f32()? as f64);
                }
                let mut action = Vec::with_capacity(act_dim);
                for _ in 0..act_dim {
                    action.push(r.read_f32()? as f64);
                }
                let reward = r.read_f32()? as f64;
                let cost = r.read_f32()? as f64;
                let flags = r.read_u8()?;
                let step = TrajectoryStep {
                    observation,
                    action,
                    reward,
                    cost,
                    is_first: flags & 1 != 0,
                    is_terminal: flags & 2 != 0,
                };
                if i == 0 && !step.is_first {
                    return Err(FospError::Format {
                        offset: r.offset - 1,
                        detail: "trajectory does not start with is_first".into(),
                    });
                }
                steps.push(step);
            }
            file.trajectories.push(Trajectory { steps, behavior });
        }
        Ok(file)
    }

    pub fn total_steps(&self) -> usize {
        self.trajectories.iter().map(|t| t.len()).sum()
    }
}

struct Reader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Reader<R> {
    fn read_exact(&mut self, buf: &mut [u8]) -> Result<()> {
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Err(FospError::Format {
                offset: self.offset,
                detail: "truncated file".into(),
            }),
            Err(e) => Err(e.into()),
        }
    }

    fn read_u8(&mut self) -> Result<u8> {
        let mut b = [0u8; 1];
        self.read_exact(&mut b)?;
        Ok(b[0])
    }

    fn read_u16(&mut self) -> Result<u16> {
        let mut b = [0u8; 2];
        self.read_exact(&mut b)?;
        Ok(u16::from_le_bytes(b))
    }

    fn read_u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn read_f32(&mut self) -> Result<f32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b)?;
        Ok(f32::from_le_bytes(b))
    }

    fn try_read_u32(&mut self) -> Result<Option<u32>> {
        let mut buf = [0u8; 4];
        let mut filled = 0;
        while filled < 4 {
            let n = self.inner.read(&mut buf[filled..]).map_err(FospError::from)?;
            if n == 0 {
                if filled == 0 {
                    return Ok(None);
                }
                return Err(FospError::Format {
                    offset: self.offset + filled as u64,
                    detail: "truncated file".into(),
                });
            }
            filled += n;
        }
        self.offset += 4;
        Ok(Some(u32::from_le_bytes(buf)))
    }
}

/// Generates the offline dataset: `counts = (random, safe, unsafe)` episode
/// counts, each part tagged with its behavior id. Safe/unsafe parts use
/// epsilon-greedy scripted policies.
pub fn generate_dataset(
    env: &mut EnvInstance,
    counts: (usize, usize, usize),
    epsilon: f64,
    seed: u64,
) -> Result<TrajectoryFile> {
    let mut file = TrajectoryFile::for_env(env);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let parts = [
        (BehaviorKind::Random, counts.0),
        (BehaviorKind::Safe, counts.1),
        (BehaviorKind::Unsafe, counts.2),
    ];
    for (kind, n) in parts {
        if n == 0 {
            continue;
        }
        let policy = BehaviorPolicy::new(kind, env, epsilon)?;
        for _ in 0..n {
            let ep_seed: u64 = rng.random();
            let mut act_rng = ChaCha8Rng::seed_from_u64(rng.random());
            let traj = rollout_episode(env, ep_seed, kind.id(), |obs, _| {
                policy.action(obs, &mut act_rng)
            })?;
            file.push(traj)?;
        }
    }
    Ok(file)
}

/// In-memory trajectory store with FIFO eviction beyond capacity.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    trajectories: Vec<Trajectory>,
    capacity: usize,
    pub inserted: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> ReplayBuffer {
        ReplayBuffer {
            trajectories: Vec::new(),
            capacity,
            inserted: 0,
        }
    }

    pub fn from_file(file: &TrajectoryFile, capacity: usize) -> ReplayBuffer {
        let mut buf = ReplayBuffer::new(capacity.max(file.trajectories.len()));
        for t in &file.trajectories {
            buf.append(t.clone());
        }
        buf
    }

    pub fn append(&mut self, traj: Trajectory) {
        self.trajectories.push(traj);
        self.inserted += 1;
        if self.trajectories.len() > self.capacity {
            self.trajectories.remove(0);
        }
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }
}

/// A batch of B contiguous length-T segments, laid out as tensors.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B, T, obs_dim]`
    pub observations: Array3<f64>,
    /// `[B, T, act_dim]`, the action that LED to each step.
    pub actions: Array3<f64>,
    /// `[B, T]`
    pub rewards: Array2<f64>,
    pub costs: Array2<f64>,
    pub is_first: Array2<bool>,
    pub is_terminal: Array2<bool>,
}

impl Batch {
    pub fn batch_size(&self) -> usize {
        self.observations.dim().0
    }

    pub fn seq_len(&self) -> usize {
        self.observations.dim().1
    }
}

/// Samples B segments of length T, uniform over all valid (trajectory,
/// offset) pairs; segments never span trajectory boundaries.
pub fn sample_batch(
    buffer: &ReplayBuffer,
    batch_size: usize,
    seq_len: usize,
    rng: &mut impl Rng,
) -> Result<Batch> {
    let eligible: Vec<(usize, usize)> = buffer
        .trajectories
        .iter()
        .enumerate()
        .filter(|(_, t)| t.len() >= seq_len)
        .map(|(i, t)| (i, t.len() - seq_len + 1))
        .collect();
    let total_starts: usize = eligible.iter().map(|(_, n)| n).sum();
    if total_starts == 0 {
        return Err(FospError::InvalidArgument(format!(
            "no trajectory of length >= {seq_len} in buffer"
        )));
    }
    let first = &buffer.trajectories[eligible[0].0];
    let obs_dim = first.steps[0].observation.len();
    let act_dim = first.steps[0].action.len();

    let mut observations = Array3::zeros((batch_size, seq_len, obs_dim));
    let mut actions = Array3::zeros((batch_size, seq_len, act_dim));
    let mut rewards = Array2::zeros((batch_size, seq_len));
    let mut costs = Array2::zeros((batch_size, seq_len));
    let mut is_first = Array2::from_elem((batch_size, seq_len), false);
    let mut is_terminal = Array2::from_elem((batch_size, seq_len), false);

    for b in 0..batch_size {
        let mut pick = rng.random_range(0..total_starts);
        let mut chosen = eligible[0].0;
        let mut offset = 0;
        for &(ti, n) in &eligible {
            if pick < n {
                chosen = ti;
                offset = pick;
                break;
            }
            pick -= n;
        }
        let traj = &buffer.trajectories[chosen];
        for t in 0..seq_len {
            let step = &traj.steps[offset + t];
            for (d, &v) in step.observation.iter().enumerate() {
                observations[[b, t, d]] = v;
            }
            for (d, &v) in step.action.iter().enumerate() {
                actions[[b, t, d]] = v;
            }
            rewards[[b, t]] = step.reward;
            costs[[b, t]] = step.cost;
            is_first[[b, t]] = step.is_first;
            is_terminal[[b, t]] = step.is_terminal;
        }
    }
    Ok(Batch {
        observations,
        actions,
        rewards,
        costs,
        is_first,
        is_terminal,
    })
}

/// Encoded dimensionality bookkeeping for batches sampled from an env.
pub fn action_space_of(file: &TrajectoryFile) -> ActionSpace {
    if file.discrete_actions {
        ActionSpace::Discrete(file.act_dim)
    } else {
        ActionSpace::Box {
            dim: file.act_dim,
            low: -1.0,
            high: 1.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::GridworldCmdp;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn grid_env() -> EnvInstance {
        EnvInstance::Grid(GridworldCmdp::wall_gap_5x5(0.0, 100, 0.997))
    }

    fn synthetic_traj(len: usize, behavior: u8) -> Trajectory {
        let steps = (0..len)
            .map(|i| TrajectoryStep {
                observation: vec![i as f64, 1.0],
                action: vec![if i == 0 { 0.0 } else { 1.0 }],
                reward: 0.125 * i as f64,
                cost: if i % 3 == 0 && i > 0 { 1.0 } else { 0.0 },
                is_first: i == 0,
                is_terminal: i + 1 == len,
            })
            .collect();
        Trajectory { steps, behavior }
    }

    #[test]
    fn generate_dataset_mixture_counts_and_tags() {
        let mut env = grid_env();
        let file = generate_dataset(&mut env, (20, 20, 20), 0.1, 7).unwrap();
        assert_eq!(file.trajectories.len(), 60);
        for kind in 0..3u8 {
            let n = file.trajectories.iter().filter(|t| t.behavior == kind).count();
            assert_eq!(n, 20, "behavior {kind}");
        }
        for t in &file.trajectories {
            assert!(t.steps[0].is_first);
            assert!(t.steps.iter().all(|s| s.cost == 0.0 || s.cost == 1.0));
        }
    }

    #[test]
    fn generate_dataset_single_random_trajectory() {
        let mut env = grid_env();
        let file = generate_dataset(&mut env, (0, 0, 1), 0.1, 3).unwrap();
        assert_eq!(file.trajectories.len(), 1);
        assert_eq!(file.trajectories[0].behavior, BehaviorKind::Unsafe.id());
    }

    #[test]
    fn safe_part_cheaper_than_unsafe_part() {
        let mut env = grid_env();
        let file = generate_dataset(&mut env, (0, 30, 30), 0.1, 11).unwrap();
        let mean_cost = |id: u8| {
            let parts: Vec<&Trajectory> =
                file.trajectories.iter().filter(|t| t.behavior == id).collect();
            parts.iter().map(|t| t.cost_return()).sum::<f64>() / parts.len() as f64
        };
        let safe = mean_cost(BehaviorKind::Safe.id());
        let unsafe_c = mean_cost(BehaviorKind::Unsafe.id());
        assert!(safe < unsafe_c, "safe {safe} vs unsafe {unsafe_c}");
    }

    #[test]
    fn sample_batch_shapes() {
        let mut buf = ReplayBuffer::new(100);
        for _ in 0..4 {
            buf.append(synthetic_traj(40, 0));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = sample_batch(&buf, 64, 16, &mut rng).unwrap();
        assert_eq!(batch.observations.dim(), (64, 16, 2));
        assert_eq!(batch.actions.dim(), (64, 16, 1));
        assert_eq!(batch.rewards.dim(), (64, 16));
        assert_eq!(batch.costs.dim(), (64, 16));
    }

    #[test]
    fn sample_batch_exact_length_trajectory_is_forced() {
        let mut buf = ReplayBuffer::new(10);
        buf.append(synthetic_traj(16, 0));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = sample_batch(&buf, 3, 16, &mut rng).unwrap();
        for b in 0..3 {
            assert_eq!(batch.observations[[b, 0, 0]], 0.0);
            assert!(batch.is_first[[b, 0]]);
            assert!(batch.is_terminal[[b, 15]]);
        }
    }

    #[test]
    fn sample_batch_errors_when_all_trajectories_too_short() {
        let mut buf = ReplayBuffer::new(10);
        buf.append(synthetic_traj(5, 0));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(sample_batch(&buf, 1, 16, &mut rng).is_err());
    }

    #[test]
    fn sample_batch_never_spans_trajectory_boundaries() {
        let mut buf = ReplayBuffer::new(10);
        buf.append(synthetic_traj(20, 0));
        buf.append(synthetic_traj(30, 1));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let batch = sample_batch(&buf, 8, 10, &mut rng).unwrap();
            for b in 0..8 {
                for t in 1..10 {
                    // Within a segment the synthetic obs index increments by 1.
                    let prev = batch.observations[[b, t - 1, 0]];
                    let cur = batch.observations[[b, t, 0]];
                    assert_eq!(cur, prev + 1.0);
                    assert!(!batch.is_first[[b, t]]);
                }
            }
        }
    }

    #[test]
    fn sample_batch_offsets_are_uniform() {
        // Single trajectory with 10 valid offsets; chi-squared over 1e5 draws.
        let mut buf = ReplayBuffer::new(10);
        buf.append(synthetic_traj(17, 0)); // 17 - 8 + 1 = 10 offsets
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut counts = [0f64; 10];
        let draws = 100_000;
        let per_call = 100;
        for _ in 0..(draws / per_call) {
            let batch = sample_batch(&buf, per_call, 8, &mut rng).unwrap();
            for b in 0..per_call {
                counts[batch.observations[[b, 0, 0]] as usize] += 1.0;
            }
        }
        let expected = draws as f64 / 10.0;
        let chi2: f64 = counts.iter().map(|c| (c - expected) * (c - expected) / expected).sum();
        let dist = ChiSquared::new(9.0).unwrap();
        let p = 1.0 - dist.cdf(chi2);
        assert!(p > 0.01, "chi2 {chi2}, p {p}");
    }

    #[test]
    fn sampling_is_deterministic_given_seed() {
        let mut buf = ReplayBuffer::new(10);
        buf.append(synthetic_traj(40, 0));
        buf.append(synthetic_traj(25, 1));
        let draw = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let mut out = Vec::new();
            for _ in 0..5 {
                let b = sample_batch(&buf, 4, 8, &mut rng).unwrap();
                out.push(b.observations);
            }
            out
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn save_load_round_trip_and_resave_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("d1.fospdata");
        let p2 = dir.path().join("d2.fospdata");
        let mut env = grid_env();
        let file = generate_dataset(&mut env, (3, 3, 3), 0.1, 5).unwrap();
        file.save(&p1).unwrap();
        let loaded = TrajectoryFile::load(&p1).unwrap();
        assert_eq!(loaded.trajectories.len(), 9);
        loaded.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn conservation_of_sums_through_float32_disk_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.fospdata");
        let mut env = grid_env();
        let file = generate_dataset(&mut env, (5, 5, 5), 0.1, 13).unwrap();
        let reward_sum: f64 = file.trajectories.iter().map(|t| t.reward_return()).sum();
        let cost_sum: f64 = file.trajectories.iter().map(|t| t.cost_return()).sum();
        file.save(&p).unwrap();
        let loaded = TrajectoryFile::load(&p).unwrap();
        let r2: f64 = loaded.trajectories.iter().map(|t| t.reward_return()).sum();
        let c2: f64 = loaded.trajectories.iter().map(|t| t.cost_return()).sum();
        assert!((reward_sum - r2).abs() <= 1e-5 * reward_sum.abs().max(1.0));
        assert!((cost_sum - c2).abs() <= 1e-5 * cost_sum.abs().max(1.0));
    }

    #[test]
    fn truncated_file_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.fospdata");
        let mut env = grid_env();
        let file = generate_dataset(&mut env, (1, 0, 0), 0.1, 1).unwrap();
        file.save(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        match TrajectoryFile::load(&p) {
            Err(FospError::Format { offset, detail }) => {
                assert!(detail.contains("truncated"));
                assert!(offset > 0);
            }
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.fospdata");
        std::fs::write(&p, b"WRONGMAG\x01\x00").unwrap();
        assert!(matches!(
            TrajectoryFile::load(&p),
            Err(FospError::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn empty_dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.fospdata");
        let file = TrajectoryFile::new(4, 2, false);
        file.save(&p).unwrap();
        let loaded = TrajectoryFile::load(&p).unwrap();
        assert_eq!(loaded, file);
        assert!(loaded.trajectories.is_empty());
    }

    #[test]
    fn replay_buffer_fifo_eviction() {
        let mut buf = ReplayBuffer::new(3);
        for i in 0..5u8 {
            buf.append(synthetic_traj(4, i));
        }
        assert_eq!(buf.len(), 3);
        assert_eq!(buf.inserted, 5);
        let ids: Vec<u8> = buf.trajectories().iter().map(|t| t.behavior).collect();
        assert_eq!(ids, vec![2, 3, 4]);
    }
}

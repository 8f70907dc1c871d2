//! Trajectories, the replay buffer, future-goal relabeling and the dataset file format.

use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nfrl_core::grad::Matrix;
use nfrl_core::kv::KvText;
use rand::Rng;

use crate::env::{GOAL_DIM, STATE_DIM};
use crate::error::{Result, RlError};

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `(T + 1) × state_dim`.
    pub states: Matrix,
    /// `T × action_dim`.
    pub actions: Matrix,
    pub rewards: Vec<f64>,
    /// `dones[t]` marks `states[t + 1]` as terminal.
    pub dones: Vec<bool>,
    pub episode_id: u64,
    /// Route family the trajectory was generated with.
    pub mode: usize,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.rows() == 0
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.actions.rows();
        if self.states.rows() != t + 1 || self.rewards.len() != t || self.dones.len() != t {
            return Err(RlError::Format(format!(
                "episode {}: {} states, {} actions, {} rewards, {} dones",
                self.episode_id,
                self.states.rows(),
                t,
                self.rewards.len(),
                self.dones.len()
            )));
        }
        if !self.states.is_finite() || !self.actions.is_finite() || self.rewards.iter().any(|r| !r.is_finite()) {
            return Err(RlError::Format(format!("episode {} contains non-finite values", self.episode_id)));
        }
        Ok(())
    }

    pub fn position(&self, t: usize) -> [f64; GOAL_DIM] {
        let s = self.states.row_slice(t);
        [s[0], s[1]]
    }

    pub fn positions(&self) -> impl Iterator<Item = [f64; GOAL_DIM]> + '_ {
        (0..self.states.rows()).map(|t| self.position(t))
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

/// Offset `Δ ∈ [1, n]` with `P(Δ) ∝ γ^{Δ−1}`, drawn by inverting the CDF.
pub fn truncated_geometric<R: Rng>(n: usize, gamma: f64, rng: &mut R) -> usize {
    debug_assert!(n >= 1);
    if n == 1 {
        return 1;
    }
    if gamma >= 1.0 {
        return rng.random_range(1..=n);
    }
    let u: f64 = rng.random();
    let tail = 1.0 - gamma.powi(n as i32);
    let k = ((1.0 - u * tail).ln() / gamma.ln()).ceil();
    if k.is_finite() {
        (k as usize).clamp(1, n)
    } else {
        1
    }
}

/// Exact pmf of [`truncated_geometric`].
pub fn truncated_geometric_pmf(n: usize, gamma: f64) -> Vec<f64> {
    if gamma >= 1.0 {
        return vec![1.0 / n as f64; n];
    }
    let norm = (1.0 - gamma) / (1.0 - gamma.powi(n as i32));
    (1..=n).map(|k| norm * gamma.powi(k as i32 - 1)).collect()
}

/// A transition sampled from the buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransitionRef {
    pub traj: usize,
    pub t: usize,
}

/// Ring of trajectories. Goals are the position slice of states.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    trajectories: VecDeque<Trajectory>,
    capacity: usize,
    /// `cumulative[i]` = transitions in trajectories `0..=i`.
    cumulative: Vec<usize>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { trajectories: VecDeque::new(), capacity: capacity.max(1), cumulative: Vec::new() }
    }

    pub fn from_trajectories(trajs: Vec<Trajectory>) -> Self {
        let mut b = Self::new(trajs.len().max(1));
        for t in trajs {
            b.push(t);
        }
        b
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, traj: Trajectory) {
        if traj.is_empty() {
            return;
        }
        if self.trajectories.len() == self.capacity {
            self.trajectories.pop_front();
        }
        self.trajectories.push_back(traj);
        self.cumulative.clear();
        let mut acc = 0;
        for t in &self.trajectories {
            acc += t.len();
            self.cumulative.push(acc);
        }
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn num_transitions(&self) -> usize {
        self.cumulative.last().copied().unwrap_or(0)
    }

    pub fn num_states(&self) -> usize {
        self.num_transitions() + self.trajectories.len()
    }

    pub fn trajectory(&self, i: usize) -> &Trajectory {
        &self.trajectories[i]
    }

    pub fn trajectories(&self) -> impl Iterator<Item = &Trajectory> {
        self.trajectories.iter()
    }

    /// Uniform over all stored transitions.
    pub fn sample_transition<R: Rng>(&self, rng: &mut R) -> Result<TransitionRef> {
        let n = self.num_transitions();
        if n == 0 {
            return Err(RlError::State("sampling from an empty replay buffer".into()));
        }
        let k = rng.random_range(0..n);
        let traj = self.cumulative.partition_point(|&c| c <= k);
        let before = if traj == 0 { 0 } else { self.cumulative[traj - 1] };
        Ok(TransitionRef { traj, t: k - before })
    }

    /// Goal `states[t + Δ]` of the same trajectory with `Δ` truncated-geometric on `[1, T − t]`.
    pub fn sample_future_goal<R: Rng>(&self, at: TransitionRef, gamma_fut: f64, rng: &mut R) -> Result<[f64; GOAL_DIM]> {
        let traj = &self.trajectories[at.traj];
        if at.t >= traj.len() {
            return Err(RlError::State(format!("t = {} has no future in a trajectory of {} transitions", at.t, traj.len())));
        }
        let delta = truncated_geometric(traj.len() - at.t, gamma_fut, rng);
        Ok(traj.position(at.t + delta))
    }

    /// Goal of a uniformly drawn stored state.
    pub fn sample_goal<R: Rng>(&self, rng: &mut R) -> Result<[f64; GOAL_DIM]> {
        let at = self.sample_transition(rng)?;
        let traj = &self.trajectories[at.traj];
        Ok(traj.position(at.t + rng.random_range(0..=1)))
    }

    pub fn state(&self, at: TransitionRef) -> &[f64] {
        self.trajectories[at.traj].states.row_slice(at.t)
    }

    pub fn next_state(&self, at: TransitionRef) -> &[f64] {
        self.trajectories[at.traj].states.row_slice(at.t + 1)
    }

    pub fn action(&self, at: TransitionRef) -> &[f64] {
        self.trajectories[at.traj].actions.row_slice(at.t)
    }

    pub fn reward(&self, at: TransitionRef) -> f64 {
        self.trajectories[at.traj].rewards[at.t]
    }

    pub fn done(&self, at: TransitionRef) -> bool {
        self.trajectories[at.traj].dones[at.t]
    }
}

pub const DATASET_MAGIC: &str = "NFRL-DATASET";

/// Trajectories plus the header describing how they were produced.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: KvText,
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn state_dim(&self) -> usize {
        self.trajectories.first().map(|t| t.states.cols()).unwrap_or(STATE_DIM)
    }

    pub fn action_dim(&self) -> usize {
        self.trajectories.first().map(|t| t.actions.cols()).unwrap_or(0)
    }

    /// Header line, then little-endian f64 arrays: lengths, episode ids,
    /// modes, states, actions, rewards, dones.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let mut header = self.header.clone();
        header.set("format", DATASET_MAGIC);
        header.set("n_traj", self.trajectories.len());
        header.set("state_dim", self.state_dim());
        header.set("action_dim", self.action_dim());
        header.set("arrays", "lengths,episode_ids,modes,states,actions,rewards,dones");
        writeln!(w, "{}", header.to_line())?;
        let mut put = |v: f64| w.write_all(&v.to_le_bytes());
        for t in &self.trajectories {
            put(t.len() as f64)?;
        }
        for t in &self.trajectories {
            put(t.episode_id as f64)?;
        }
        for t in &self.trajectories {
            put(t.mode as f64)?;
        }
        for t in &self.trajectories {
            for v in t.states.as_slice() {
                put(*v)?;
            }
        }
        for t in &self.trajectories {
            for v in t.actions.as_slice() {
                put(*v)?;
            }
        }
        for t in &self.trajectories {
            for v in &t.rewards {
                put(*v)?;
            }
        }
        for t in &self.trajectories {
            for d in &t.dones {
                put(if *d { 1.0 } else { 0.0 })?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut line = String::new();
        r.read_line(&mut line)?;
        let header = KvText::parse_line(line.trim_end()).map_err(|e| RlError::Format(e.to_string()))?;
        if header.get("format") != Some(DATASET_MAGIC) {
            return Err(RlError::Format("missing dataset format marker".into()));
        }
        let field = |k: &str| -> Result<usize> {
            header
                .get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| RlError::Format(format!("header field '{k}' missing or not an integer")))
        };
        let (n, sd, ad) = (field("n_traj")?, field("state_dim")?, field("action_dim")?);
        let mut buf = [0u8; 8];
        let mut next = |r: &mut BufReader<R>| -> Result<f64> {
            r.read_exact(&mut buf).map_err(|_| RlError::Format("dataset payload truncated".into()))?;
            Ok(f64::from_le_bytes(buf))
        };
        let mut read_vec = |r: &mut BufReader<R>, len: usize| -> Result<Vec<f64>> { (0..len).map(|_| next(r)).collect() };
        let lengths: Vec<usize> = read_vec(&mut r, n)?.into_iter().map(|v| v as usize).collect();
        let ids = read_vec(&mut r, n)?;
        let modes = read_vec(&mut r, n)?;
        let mut states = Vec::with_capacity(n);
        for &l in &lengths {
            states.push(Matrix::from_vec(l + 1, sd, read_vec(&mut r, (l + 1) * sd)?));
        }
        let mut actions = Vec::with_capacity(n);
        for &l in &lengths {
            actions.push(Matrix::from_vec(l, ad, read_vec(&mut r, l * ad)?));
        }
        let mut rewards = Vec::with_capacity(n);
        for &l in &lengths {
            rewards.push(read_vec(&mut r, l)?);
        }
        let mut trajectories = Vec::with_capacity(n);
        for (i, ((s, a), rw)) in states.into_iter().zip(actions).zip(rewards).enumerate() {
            let dones = read_vec(&mut r, lengths[i])?.into_iter().map(|d| d != 0.0).collect();
            let t = Trajectory { states: s, actions: a, rewards: rw, dones, episode_id: ids[i] as u64, mode: modes[i] as usize };
            t.validate()?;
            trajectories.push(t);
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(RlError::Format(format!("{} trailing bytes after payload", rest.len())));
        }
        Ok(Self { header, trajectories })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }
}

//! Scripted waypoint experts and dataset generation.

use nfrl_core::grad::Matrix;
use nfrl_core::kv::KvText;
use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{Dataset, Trajectory};
use crate::env::{Cell, EnvConfig, Maze, MazeId, PointMassEnv, ACTION_DIM, GOAL_DIM, STATE_DIM};
use crate::error::{Result, RlError};

/// Minimum success rate of the clean expert before a dataset is accepted.
pub const MIN_EXPERT_SUCCESS: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpertConfig {
    /// Cruise speed of the velocity target.
    pub speed: f64,
    /// Std of Gaussian noise added to every action before clipping.
    pub action_noise: f64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self { speed: 0.4, action_noise: 0.05 }
    }
}

/// Follows the cell path of one route family toward a goal position.
#[derive(Debug, Clone)]
pub struct ScriptedExpert {
    maze: Maze,
    path: Vec<Cell>,
    goal: [f64; GOAL_DIM],
    dt: f64,
    drag: f64,
    pub config: ExpertConfig,
}

impl ScriptedExpert {
    /// Route `mode` from the maze start to its task goal.
    pub fn new(maze: &Maze, env: &EnvConfig, mode: usize, config: ExpertConfig) -> Result<Self> {
        Self::toward(maze, env, mode, maze.start, maze.cell_center(maze.goal), config)
    }

    pub fn toward(maze: &Maze, env: &EnvConfig, mode: usize, from: Cell, goal: [f64; GOAL_DIM], config: ExpertConfig) -> Result<Self> {
        if mode >= maze.num_modes() {
            return Err(RlError::Config(format!("{} has {} route families, asked for mode {mode}", maze.id, maze.num_modes())));
        }
        let target = maze.cell_of(goal[0], goal[1]);
        let mut stops: Vec<Cell> = vec![from];
        if let Some(vias) = maze.route_vias.get(mode) {
            stops.extend(vias.iter().copied());
        }
        stops.push(target);
        let mut path: Vec<Cell> = vec![from];
        for w in stops.windows(2) {
            let leg = maze
                .shortest_path(w[0], w[1])
                .ok_or_else(|| RlError::Generation(format!("no path from {:?} to {:?} in {}", w[0], w[1], maze.id)))?;
            path.extend(leg.into_iter().skip(1));
        }
        Ok(Self { maze: maze.clone(), path, goal, dt: env.dt, drag: env.drag, config })
    }

    pub fn path(&self) -> &[Cell] {
        &self.path
    }

    /// Next target and whether it is the final goal.
    fn waypoint(&self, p: [f64; 2]) -> ([f64; 2], bool) {
        let here = self.maze.cell_of(p[0], p[1]);
        match self.path.iter().rposition(|&c| c == here) {
            Some(k) if k + 1 < self.path.len() => (self.maze.cell_center(self.path[k + 1]), false),
            Some(_) => (self.goal, true),
            None => {
                let nearest = self
                    .path
                    .iter()
                    .map(|&c| self.maze.cell_center(c))
                    .min_by(|a, b| dist2(*a, p).total_cmp(&dist2(*b, p)))
                    .unwrap_or(self.goal);
                (nearest, false)
            }
        }
    }

    /// Noise-free action.
    pub fn clean_action(&self, s: &[f64]) -> [f64; ACTION_DIM] {
        let p = [s[0], s[1]];
        let (w, last) = self.waypoint(p);
        let (dx, dy) = (w[0] - p[0], w[1] - p[1]);
        let d = (dx * dx + dy * dy).sqrt().max(1e-12);
        let speed = if last { self.config.speed.min(2.0 * d) } else { self.config.speed };
        let keep = 1.0 - self.drag;
        [
            ((speed * dx / d - keep * s[2]) / self.dt).clamp(-1.0, 1.0),
            ((speed * dy / d - keep * s[3]) / self.dt).clamp(-1.0, 1.0),
        ]
    }

    pub fn action<R: Rng>(&self, s: &[f64], rng: &mut R) -> [f64; ACTION_DIM] {
        let mut a = self.clean_action(s);
        if self.config.action_noise > 0.0 {
            let n = Normal::new(0.0, self.config.action_noise).expect("positive std");
            for v in a.iter_mut() {
                *v = (*v + n.sample(rng)).clamp(-1.0, 1.0);
            }
        }
        a
    }
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// Runs one episode with `act` choosing actions; returns the trajectory and whether the goal was reached.
pub fn rollout<R: Rng>(env: &mut PointMassEnv, episode_id: u64, mode: usize, rng: &mut R, mut act: impl FnMut(&[f64], &mut R) -> [f64; ACTION_DIM]) -> Result<(Trajectory, bool)> {
    let s0 = env.reset(rng);
    let mut states = s0.to_vec();
    let mut actions = Vec::new();
    let mut rewards = Vec::new();
    let mut dones = Vec::new();
    let mut s = s0;
    let mut success = false;
    while !env.is_done() {
        let a = act(&s, rng);
        let out = env.step(&a)?;
        actions.extend_from_slice(&a);
        rewards.push(out.reward);
        dones.push(out.success);
        states.extend_from_slice(&out.state);
        s = out.state;
        success = out.success;
    }
    let t = rewards.len();
    let traj = Trajectory {
        states: Matrix::from_vec(t + 1, STATE_DIM, states),
        actions: Matrix::from_vec(t, ACTION_DIM, actions),
        rewards,
        dones,
        episode_id,
        mode,
    };
    Ok((traj, success))
}

/// How the trajectories of a dataset are produced.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationSpec {
    pub maze: MazeId,
    pub env: EnvConfig,
    pub n_traj: usize,
    /// Unnormalized weights over route families.
    pub mode_mix: Vec<f64>,
    pub expert: ExpertConfig,
    /// Fraction of trajectories produced with `noisy_action_std` instead of the expert noise.
    pub noisy_fraction: f64,
    pub noisy_action_std: f64,
    pub seed: u64,
}

impl GenerationSpec {
    pub fn expert(maze: MazeId, n_traj: usize, seed: u64) -> Self {
        let modes = Maze::new(maze).num_modes();
        Self {
            maze,
            env: EnvConfig::default(),
            n_traj,
            mode_mix: vec![1.0; modes],
            expert: ExpertConfig::default(),
            noisy_fraction: 0.0,
            noisy_action_std: 0.0,
            seed,
        }
    }

    pub fn header(&self) -> KvText {
        let mut h = KvText::new();
        h.set("env", self.maze);
        h.set("horizon", self.env.horizon);
        h.set("dt", self.env.dt);
        h.set("drag", self.env.drag);
        h.set("goal_radius", self.env.goal_radius);
        h.set("start_jitter", self.env.start_jitter);
        h.set("reward", self.env.reward.name());
        h.set("mode_mix", self.mode_mix.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(","));
        h.set("expert_speed", self.expert.speed);
        h.set("expert_noise", self.expert.action_noise);
        h.set("noisy_fraction", self.noisy_fraction);
        h.set("noisy_action_std", self.noisy_action_std);
        h.set("seed", self.seed);
        h.set("generator", crate::GENERATOR_VERSION);
        h
    }
}

/// Expert (and optionally noisy) trajectories. Fails when the clean expert
/// succeeds on fewer than [`MIN_EXPERT_SUCCESS`] of its episodes.
pub fn generate_expert_dataset<R: Rng>(spec: &GenerationSpec, rng: &mut R) -> Result<Dataset> {
    if spec.n_traj == 0 {
        return Err(RlError::Config("n_traj must be ≥ 1".into()));
    }
    if !(0.0..=1.0).contains(&spec.noisy_fraction) {
        return Err(RlError::Config(format!("noisy_fraction {} outside [0, 1]", spec.noisy_fraction)));
    }
    let maze = Maze::new(spec.maze);
    if spec.mode_mix.len() != maze.num_modes() {
        return Err(RlError::Config(format!("{} needs {} mode weights, got {}", spec.maze, maze.num_modes(), spec.mode_mix.len())));
    }
    let picker = WeightedIndex::new(&spec.mode_mix).map_err(|e| RlError::Config(format!("mode_mix: {e}")))?;
    let experts: Vec<ScriptedExpert> = (0..maze.num_modes()).map(|m| ScriptedExpert::new(&maze, &spec.env, m, spec.expert)).collect::<Result<_>>()?;
    let noisy: Vec<ScriptedExpert> = experts
        .iter()
        .map(|e| ScriptedExpert { config: ExpertConfig { action_noise: spec.noisy_action_std, ..e.config }, ..e.clone() })
        .collect();
    let n_noisy = (spec.noisy_fraction * spec.n_traj as f64).round() as usize;
    let mut env = PointMassEnv::new(spec.maze, spec.env.clone());
    let mut trajectories = Vec::with_capacity(spec.n_traj);
    let (mut clean, mut clean_ok) = (0usize, 0usize);
    for i in 0..spec.n_traj {
        let mode = picker.sample(rng);
        let is_noisy = i < n_noisy;
        let expert = if is_noisy { &noisy[mode] } else { &experts[mode] };
        let (traj, ok) = rollout(&mut env, i as u64, mode, rng, |s, r| expert.action(s, r))?;
        if !is_noisy {
            clean += 1;
            clean_ok += ok as usize;
        }
        trajectories.push(traj);
    }
    if clean > 0 {
        let rate = clean_ok as f64 / clean as f64;
        if rate < MIN_EXPERT_SUCCESS {
            return Err(RlError::Generation(format!(
                "expert reached the goal in {clean_ok}/{clean} episodes ({:.1}% < {:.0}%)",
                100.0 * rate,
                100.0 * MIN_EXPERT_SUCCESS
            )));
        }
    }
    let mut header = spec.header();
    header.set("expert_success", if clean > 0 { clean_ok as f64 / clean as f64 } else { f64::NAN });
    header.set("mode_counts", mode_counts(&trajectories, maze.num_modes()).iter().map(|c| c.to_string()).collect::<Vec<_>>().join(","));
    Ok(Dataset { header, trajectories })
}

pub fn mode_counts(trajs: &[Trajectory], modes: usize) -> Vec<usize> {
    let mut counts = vec![0; modes];
    for t in trajs {
        if t.mode < modes {
            counts[t.mode] += 1;
        }
    }
    counts
}

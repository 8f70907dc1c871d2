//! Goal-conditioned Q as a discounted-occupancy flow, and exploration by
//! commanding the least-dense buffer goal.

use nfrl_core::flow::{ConditionContext, FlowConfig, FlowModel};
use nfrl_core::grad::{Adam, AdamConfig, Matrix, StepOutcome, Tape};
use nfrl_core::objectives::{apply_mask, mle_loss, LossReport, MleBatch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{truncated_geometric, ReplayBuffer, Trajectory};
use crate::env::{Maze, PointMassEnv, ACTION_DIM, GOAL_DIM, STATE_DIM};
use crate::error::{Result, RlError};
use crate::policy::{NfPolicy, Policy, PolicyInput};

#[derive(Debug, Clone, PartialEq)]
pub struct UgsConfig {
    pub candidate_count: usize,
    pub goal_noise_std: f64,
    pub gamma: f64,
    pub mask_prob: f64,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for UgsConfig {
    fn default() -> Self {
        Self { candidate_count: 1024, goal_noise_std: 0.05, gamma: 0.99, mask_prob: 0.1, batch_size: 256, lr: 3e-4 }
    }
}

/// One flow modelling both `p(g | s, a)` and, with the mask bit set, `p(g)`.
#[derive(Debug, Clone)]
pub struct UgsState {
    pub joint: FlowModel,
    pub adam: Adam,
    pub config: UgsConfig,
}

impl UgsState {
    pub fn new(joint: FlowModel, config: UgsConfig) -> Result<Self> {
        if joint.dim() != GOAL_DIM {
            return Err(RlError::Config(format!("joint model has dim {}, goals have {GOAL_DIM}", joint.dim())));
        }
        let adam = Adam::new(joint.num_params(), AdamConfig { lr: config.lr, ..AdamConfig::default() });
        Ok(Self { joint, adam, config })
    }

    pub fn with_size(blocks: usize, channels: usize, rep_dim: usize, config: UgsConfig, seed: u64) -> Result<Self> {
        Self::new(FlowModel::new(FlowConfig::conditional(GOAL_DIM, STATE_DIM + ACTION_DIM, rep_dim, blocks, channels, seed))?, config)
    }

    fn cond_width(&self) -> usize {
        self.joint.cond_dim()
    }

    /// `log p(g)` of each row through the masked branch.
    pub fn marginal_log_prob(&self, goals: &Matrix) -> Result<Vec<f64>> {
        let ctxs = vec![ConditionContext::masked(self.cond_width()); goals.rows()];
        Ok(self.joint.log_prob_batch(goals, &ctxs)?)
    }
}

/// `(s_t ‖ a_t) → g = pos(s_{t+Δ})`, Δ truncated-geometric under `gamma`; a
/// `mask_prob` fraction of rows have their conditioning masked.
pub fn gcrl_q_batch<R: Rng>(config: &UgsConfig, buffer: &ReplayBuffer, rng: &mut R) -> Result<MleBatch> {
    let n = config.batch_size;
    let mut goals = Vec::with_capacity(n * GOAL_DIM);
    let mut ctx = Vec::with_capacity(n);
    for _ in 0..n {
        let at = buffer.sample_transition(rng)?;
        let traj = buffer.trajectory(at.traj);
        let delta = truncated_geometric(traj.len() - at.t, config.gamma, rng);
        goals.extend_from_slice(&traj.position(at.t + delta));
        let mut c = buffer.state(at).to_vec();
        c.extend_from_slice(buffer.action(at));
        ctx.push(ConditionContext::new(c));
    }
    let ctx = apply_mask(ctx, config.mask_prob, rng)?;
    Ok(MleBatch { x: Matrix::from_vec(n, GOAL_DIM, goals), ctx, noise_std: config.goal_noise_std })
}

pub fn gcrl_q_update<R: Rng>(ugs: &mut UgsState, buffer: &ReplayBuffer, rng: &mut R) -> Result<(f64, bool)> {
    let batch = gcrl_q_batch(&ugs.config, buffer, rng)?;
    let r = mle_loss(&ugs.joint, &batch, rng)?;
    let lr = ugs.config.lr;
    let outcome = ugs.adam.step_with_lr(ugs.joint.params_mut(), &r.grad, lr)?;
    Ok((r.loss, outcome == StepOutcome::Applied))
}

/// Index of the smallest value; the first one wins ties.
pub fn argmin_first(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in values.iter().enumerate() {
        if v.is_nan() {
            continue;
        }
        match best {
            Some(b) if values[b] <= *v => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Positions of `count` states drawn uniformly (with replacement) from the buffer.
pub fn buffer_goals<R: Rng>(buffer: &ReplayBuffer, count: usize, rng: &mut R) -> Result<Matrix> {
    let total = buffer.num_states();
    if total == 0 {
        return Err(RlError::State("no states in the buffer".into()));
    }
    let mut starts = Vec::with_capacity(buffer.len());
    let mut acc = 0;
    for t in buffer.trajectories() {
        starts.push(acc);
        acc += t.states.rows();
    }
    let mut out = Vec::with_capacity(count * GOAL_DIM);
    for _ in 0..count {
        let k = rng.random_range(0..total);
        let i = starts.partition_point(|&s| s <= k) - 1;
        out.extend_from_slice(&buffer.trajectory(i).position(k - starts[i]));
    }
    Ok(Matrix::from_vec(count, GOAL_DIM, out))
}

/// Least marginal-density goal among `candidate_count` buffer goals. Small
/// buffers fall back to a single uniform buffer goal.
pub fn select_ugs_goal<R: Rng>(ugs: &UgsState, buffer: &ReplayBuffer, rng: &mut R) -> Result<[f64; GOAL_DIM]> {
    let k = ugs.config.candidate_count.max(1);
    if buffer.num_states() < k {
        log::warn!("buffer holds {} states, fewer than {k} candidates; commanding a uniform buffer goal", buffer.num_states());
        let g = buffer_goals(buffer, 1, rng)?;
        return Ok([g.get(0, 0), g.get(0, 1)]);
    }
    let cands = buffer_goals(buffer, k, rng)?;
    let lp = ugs.marginal_log_prob(&cands)?;
    let i = argmin_first(&lp).unwrap_or(0);
    Ok([cands.get(i, 0), cands.get(i, 1)])
}

/// `−mean log p(g | s, a^π)` with `a^π` the actor's sample for `s ‖ g`
/// from noise `z`; the gradient reaches the actor through the joint model's
/// conditioning input.
pub fn gcrl_actor_loss(actor: &FlowModel, joint: &FlowModel, states: &Matrix, goals: &Matrix, z: &Matrix) -> Result<LossReport> {
    let rows = states.rows();
    if rows == 0 || goals.rows() != rows || z.rows() != rows {
        return Err(RlError::Config(format!("{} states, {} goals, {} noise rows", rows, goals.rows(), z.rows())));
    }
    let ctxs: Vec<ConditionContext> = states.iter_rows().zip(goals.iter_rows()).map(|(s, g)| ConditionContext::new(PolicyInput::StateGoal.context(s, g))).collect();
    let mut tape = Tape::new();
    let a_store = tape.add_store(actor.params());
    let j_store = tape.add_store(joint.params());
    let enc = actor.encode_contexts(&mut tape, a_store, &ctxs, rows)?;
    let zv = tape.leaf(z.clone());
    let (a_pi, _) = actor.sample_on(&mut tape, a_store, zv, enc)?;
    let s = tape.leaf(states.clone());
    let unmasked = tape.leaf(Matrix::zeros(rows, 1));
    let joint_in = tape.concat(&[s, a_pi, unmasked])?;
    let y = joint.encode_on(&mut tape, j_store, Some(joint_in))?;
    let g = tape.leaf(goals.clone());
    let lp = joint.log_prob_on(&mut tape, j_store, g, y)?;
    let m = tape.mean(lp)?;
    let loss = tape.scale(m, -1.0);
    let value = tape.value(loss).get(0, 0);
    if !value.is_finite() {
        return Err(RlError::Core(nfrl_core::Error::NonFinite { location: "goal-conditioned actor loss".into() }));
    }
    let grads = tape.backward_scalar(loss)?;
    Ok(LossReport { loss: value, grad: grads.into_params(a_store) })
}

/// Actor step on `(s, g)` with `g` a future goal of the same trajectory.
pub fn gcrl_actor_update<R: Rng>(actor: &mut FlowModel, adam: &mut Adam, ugs: &UgsState, buffer: &ReplayBuffer, lr: f64, rng: &mut R) -> Result<(f64, bool)> {
    let n = ugs.config.batch_size;
    let mut s = Vec::with_capacity(n * STATE_DIM);
    let mut g = Vec::with_capacity(n * GOAL_DIM);
    for _ in 0..n {
        let at = buffer.sample_transition(rng)?;
        let traj = buffer.trajectory(at.traj);
        let delta = truncated_geometric(traj.len() - at.t, ugs.config.gamma, rng);
        s.extend_from_slice(buffer.state(at));
        g.extend_from_slice(&traj.position(at.t + delta));
    }
    let states = Matrix::from_vec(n, STATE_DIM, s);
    let goals = Matrix::from_vec(n, GOAL_DIM, g);
    let z = actor.draw_noise(n, rng);
    let r = gcrl_actor_loss(actor, &ugs.joint, &states, &goals, &z)?;
    let outcome = adam.step_with_lr(actor.params_mut(), &r.grad, lr)?;
    Ok((r.loss, outcome == StepOutcome::Applied))
}

/// How exploration goals are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GoalSelection {
    MinDensity,
    UniformBuffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExplorationSettings {
    pub episodes: usize,
    /// Gradient steps on the joint model and the actor after each episode.
    pub grad_steps: usize,
    pub actor_lr: f64,
    pub selection: GoalSelection,
}

impl Default for ExplorationSettings {
    fn default() -> Self {
        Self { episodes: 200, grad_steps: 64, actor_lr: 3e-4, selection: GoalSelection::MinDensity }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExplorationRecord {
    pub episode: usize,
    pub goal: [f64; GOAL_DIM],
    pub coverage_entropy: f64,
    pub q_loss: f64,
    pub actor_loss: f64,
}

/// Entropy (nats) of the histogram of visited positions over the maze's free cells.
pub fn coverage_entropy<'a>(maze: &Maze, trajectories: impl IntoIterator<Item = &'a Trajectory>) -> f64 {
    let mut counts = vec![0usize; maze.cols * maze.rows];
    let mut total = 0usize;
    for t in trajectories {
        for p in t.positions() {
            let (c, r) = maze.cell_of(p[0], p[1]);
            counts[r * maze.cols + c] += 1;
            total += 1;
        }
    }
    if total == 0 {
        return 0.0;
    }
    counts.iter().filter(|&&c| c > 0).map(|&c| {
        let p = c as f64 / total as f64;
        -p * p.ln()
    }).sum()
}

/// Collect one episode toward the selected goal, then `grad_steps` updates of
/// the joint model and the actor; repeated `episodes` times. The first goal,
/// before any data exists, is uniform over the arena.
pub fn run_exploration<R: Rng>(
    env: &mut PointMassEnv,
    actor: &mut FlowModel,
    ugs: &mut UgsState,
    settings: &ExplorationSettings,
    rng: &mut R,
    mut on_episode: impl FnMut(&ExplorationRecord),
) -> Result<ReplayBuffer> {
    let mut buffer = ReplayBuffer::new(settings.episodes.max(1));
    let mut actor_adam = Adam::new(actor.num_params(), AdamConfig { lr: settings.actor_lr, ..AdamConfig::default() });
    for ep in 0..settings.episodes {
        let goal = if buffer.is_empty() {
            [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]
        } else {
            match settings.selection {
                GoalSelection::MinDensity => select_ugs_goal(ugs, &buffer, rng)?,
                GoalSelection::UniformBuffer => {
                    let g = buffer_goals(&buffer, 1, rng)?;
                    [g.get(0, 0), g.get(0, 1)]
                }
            }
        };
        let policy = NfPolicy::new(actor.clone(), None)?;
        let mut prng = ChaCha8Rng::from_rng(rng);
        let (traj, _) = {
            env.reset(rng);
            let s0 = env.state();
            env.reset_to(s0, goal);
            rollout_from(env, ep as u64, &policy, &mut prng)?
        };
        buffer.push(traj);
        let (mut q_loss, mut actor_loss) = (f64::NAN, f64::NAN);
        for _ in 0..settings.grad_steps {
            q_loss = gcrl_q_update(ugs, &buffer, rng)?.0;
            actor_loss = gcrl_actor_update(actor, &mut actor_adam, ugs, &buffer, settings.actor_lr, rng)?.0;
        }
        on_episode(&ExplorationRecord { episode: ep, goal, coverage_entropy: coverage_entropy(env.maze(), buffer.trajectories()), q_loss, actor_loss });
    }
    Ok(buffer)
}

/// Runs the current episode of `env` (already reset) to completion.
fn rollout_from<P: Policy>(env: &mut PointMassEnv, episode_id: u64, policy: &P, rng: &mut ChaCha8Rng) -> Result<(Trajectory, bool)> {
    let mut states = env.state().to_vec();
    let (mut actions, mut rewards, mut dones) = (Vec::new(), Vec::new(), Vec::new());
    let mut success = false;
    while !env.is_done() {
        let a = policy.act(&[env.state()], &[env.goal()], std::slice::from_mut(rng))?[0];
        let a = if a.iter().all(|v| v.is_finite()) { a } else { [0.0; ACTION_DIM] };
        let out = env.step(&a)?;
        actions.extend_from_slice(&a);
        rewards.push(out.reward);
        dones.push(out.success);
        states.extend_from_slice(&out.state);
        success = out.success;
    }
    let t = rewards.len();
    Ok((
        Trajectory { states: Matrix::from_vec(t + 1, STATE_DIM, states), actions: Matrix::from_vec(t, ACTION_DIM, actions), rewards, dones, episode_id, mode: 0 },
        success,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmin_prefers_the_first_tie() {
        assert_eq!(argmin_first(&[3.0, 1.0, 1.0, 2.0]), Some(1));
        assert_eq!(argmin_first(&[]), None);
        assert_eq!(argmin_first(&[f64::NAN, 2.0]), Some(1));
    }

    #[test]
    fn argmin_is_invariant_to_monotone_maps() {
        let v = [0.3, -1.2, 4.0, -1.2, 0.0];
        let mapped: Vec<f64> = v.iter().map(|x: &f64| (2.0 * x).exp() + 7.0).collect();
        assert_eq!(argmin_first(&v), argmin_first(&mapped));
    }
}

//! Twin Q-networks with Polyak-averaged targets and the TD critic loss.

use nfrl_core::flow::{ConditionContext, FlowModel};
use nfrl_core::grad::{Activation, Adam, Matrix, Mlp, MlpSpec, OutputInit, ParamStore, StepOutcome, StoreId, Tape, Var};
use nfrl_core::objectives::LossReport;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::ReplayBuffer;
use crate::error::{Result, RlError};

#[derive(Debug, Clone, PartialEq)]
pub struct CriticConfig {
    /// Width of `s ‖ a` (‖ g).
    pub in_dim: usize,
    pub hidden: Vec<usize>,
    pub layernorm: bool,
    pub activation: Activation,
    pub tau: f64,
    /// One Q head and a plain target instead of the min over twins.
    pub single_critic: bool,
    pub output_init: OutputInit,
    /// Actions are clipped to `[−b, b]` before they reach the critic, matching what the environment executes.
    pub action_clip: Option<f64>,
    pub seed: u64,
}

impl CriticConfig {
    pub fn new(in_dim: usize, hidden: Vec<usize>, seed: u64) -> Self {
        Self { in_dim, hidden, layernorm: true, activation: Activation::Gelu, tau: 0.005, single_critic: false, output_init: OutputInit::He, action_clip: Some(1.0), seed }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriticNet {
    pub q1: Mlp,
    pub q2: Option<Mlp>,
    pub online: ParamStore,
    pub target: ParamStore,
    pub config: CriticConfig,
}

impl CriticNet {
    pub fn new(config: CriticConfig) -> Result<Self> {
        if !(0.0..=1.0).contains(&config.tau) {
            return Err(RlError::Config(format!("polyak tau {} outside [0, 1]", config.tau)));
        }
        let mut online = ParamStore::new(config.seed);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let spec = MlpSpec { in_dim: config.in_dim, hidden_dims: config.hidden.clone(), out_dim: 1, layernorm: config.layernorm, activation: config.activation };
        let q1 = Mlp::build(spec.clone(), "q1", &mut online, config.output_init, &mut rng)?;
        let q2 = if config.single_critic { None } else { Some(Mlp::build(spec, "q2", &mut online, config.output_init, &mut rng)?) };
        let target = online.clone();
        Ok(Self { q1, q2, online, target, config })
    }

    pub fn num_params(&self) -> usize {
        self.online.len()
    }

    /// `actions` clipped to the configured bound.
    pub fn clip_actions(&self, actions: &Matrix) -> Matrix {
        match self.config.action_clip {
            Some(b) => actions.map(|a| a.clamp(-b, b)),
            None => actions.clone(),
        }
    }

    /// Both heads on one input, evaluated against the store registered as `store`.
    pub fn heads_on(&self, tape: &mut Tape<'_>, store: StoreId, input: Var) -> Result<(Var, Option<Var>)> {
        let a = self.q1.forward(tape, store, input)?;
        let b = match &self.q2 {
            Some(q2) => Some(q2.forward(tape, store, input)?),
            None => None,
        };
        Ok((a, b))
    }

    fn values(&self, params: &ParamStore, inputs: &Matrix, use_min: bool) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let s = tape.add_store(params);
        let x = tape.leaf(inputs.clone());
        let (a, b) = self.heads_on(&mut tape, s, x)?;
        let q1 = tape.value(a).as_slice().to_vec();
        match (b, use_min) {
            (Some(b), true) => Ok(q1.iter().zip(tape.value(b).as_slice()).map(|(x, y)| x.min(*y)).collect()),
            _ => Ok(q1),
        }
    }

    /// `Q1` of the online network.
    pub fn q1_values(&self, inputs: &Matrix) -> Result<Vec<f64>> {
        self.values(&self.online, inputs, false)
    }

    /// Backup values: min over the target twins, or the single target head.
    pub fn target_values(&self, inputs: &Matrix) -> Result<Vec<f64>> {
        self.values(&self.target, inputs, true)
    }

    /// `target ← (1 − τ)·target + τ·online`.
    pub fn polyak_update(&mut self) -> Result<()> {
        self.target.polyak_from(&self.online, self.config.tau)?;
        Ok(())
    }
}

/// Transitions `(s, a, r, s′, done)` stacked row-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticBatch {
    pub states: Matrix,
    pub actions: Matrix,
    pub rewards: Vec<f64>,
    pub next_states: Matrix,
    pub dones: Vec<bool>,
}

impl CriticBatch {
    pub fn sample<R: Rng>(buffer: &ReplayBuffer, batch_size: usize, rng: &mut R) -> Result<Self> {
        let mut idx = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            idx.push(buffer.sample_transition(rng)?);
        }
        let sd = buffer.trajectory(0).states.cols();
        let ad = buffer.trajectory(0).actions.cols();
        let gather = |f: &dyn Fn(crate::data::TransitionRef) -> Vec<f64>, w: usize| Matrix::from_vec(batch_size, w, idx.iter().flat_map(|&at| f(at)).collect());
        Ok(Self {
            states: gather(&|at| buffer.state(at).to_vec(), sd),
            actions: gather(&|at| buffer.action(at).to_vec(), ad),
            rewards: idx.iter().map(|&at| buffer.reward(at)).collect(),
            next_states: gather(&|at| buffer.next_state(at).to_vec(), sd),
            dones: idx.iter().map(|&at| buffer.done(at)).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// Rows of the raw state matrix as policy contexts.
pub fn state_contexts(states: &Matrix) -> Vec<ConditionContext> {
    states.iter_rows().map(|r| ConditionContext::new(r.to_vec())).collect()
}

/// `r + γ (1 − done) · Q̄(s′, a′)`.
pub fn td_targets(critic: &CriticNet, batch: &CriticBatch, next_actions: &Matrix, gamma: f64) -> Result<Vec<f64>> {
    let q_next = critic.target_values(&Matrix::hcat(&[&batch.next_states, &critic.clip_actions(next_actions)]))?;
    Ok(batch.rewards.iter().zip(&batch.dones).zip(q_next).map(|((r, d), q)| r + if *d { 0.0 } else { gamma * q }).collect())
}

/// Sum over heads of the mean squared TD error; targets are constants.
pub fn critic_loss(critic: &CriticNet, batch: &CriticBatch, next_actions: &Matrix, gamma: f64) -> Result<LossReport> {
    let y = td_targets(critic, batch, next_actions, gamma)?;
    let mut tape = Tape::new();
    let s = tape.add_store(&critic.online);
    let x = tape.leaf(Matrix::hcat(&[&batch.states, &critic.clip_actions(&batch.actions)]));
    let (a, b) = critic.heads_on(&mut tape, s, x)?;
    let yv = tape.leaf(Matrix::from_vec(y.len(), 1, y));
    let mut loss: Option<Var> = None;
    for head in std::iter::once(a).chain(b) {
        let d = tape.sub(head, yv)?;
        let sq = tape.square(d);
        let m = tape.mean(sq)?;
        loss = Some(match loss {
            Some(l) => tape.add(l, m)?,
            None => m,
        });
    }
    let loss = loss.expect("at least one head");
    let value = tape.value(loss).get(0, 0);
    let grads = tape.backward_scalar(loss)?;
    Ok(LossReport { loss: value, grad: grads.into_params(s) })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticMetrics {
    pub loss: f64,
    pub q_mean: f64,
    pub applied: bool,
}

/// One TD step with `a′ ∼ π(·|s′)` (one sample per row), then the Polyak target update.
pub fn critic_update<R: Rng>(critic: &mut CriticNet, adam: &mut Adam, batch: &CriticBatch, actor: &FlowModel, gamma: f64, lr: f64, rng: &mut R) -> Result<CriticMetrics> {
    let (next_actions, _) = actor.sample_batch(&state_contexts(&batch.next_states), batch.len(), rng)?;
    critic_update_with(critic, adam, batch, &next_actions, gamma, lr)
}

pub fn critic_update_with(critic: &mut CriticNet, adam: &mut Adam, batch: &CriticBatch, next_actions: &Matrix, gamma: f64, lr: f64) -> Result<CriticMetrics> {
    let report = critic_loss(critic, batch, next_actions, gamma)?;
    let q = critic.q1_values(&Matrix::hcat(&[&batch.states, &critic.clip_actions(&batch.actions)]))?;
    let outcome = adam.step_with_lr(&mut critic.online, &report.grad, lr)?;
    critic.polyak_update()?;
    Ok(CriticMetrics { loss: report.loss, q_mean: q.iter().sum::<f64>() / q.len().max(1) as f64, applied: outcome == StepOutcome::Applied })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nfrl_core::grad::AdamConfig;

    fn batch() -> CriticBatch {
        CriticBatch {
            states: Matrix::from_rows(&[[0.1, 0.2], [0.3, -0.4]]),
            actions: Matrix::from_rows(&[[0.5], [-0.5]]),
            rewards: vec![1.0, -0.5],
            next_states: Matrix::from_rows(&[[0.2, 0.2], [0.0, 0.1]]),
            dones: vec![false, true],
        }
    }

    #[test]
    fn target_lags_by_exactly_tau() {
        let mut c = CriticNet::new(CriticConfig { tau: 0.25, ..CriticConfig::new(3, vec![6], 1) }).unwrap();
        let old_target = c.target.values().to_vec();
        let mut adam = Adam::new(c.num_params(), AdamConfig::default());
        critic_update_with(&mut c, &mut adam, &batch(), &Matrix::from_rows(&[[0.3], [0.1]]), 0.9, 1e-2).unwrap();
        for ((t, o), n) in c.target.values().iter().zip(&old_target).zip(c.online.values()) {
            assert_eq!(*t, 0.75 * o + 0.25 * n);
        }
    }

    #[test]
    fn swapping_twins_keeps_the_target() {
        let c = CriticNet::new(CriticConfig::new(3, vec![6], 2)).unwrap();
        let mut swapped = c.clone();
        let (r1, r2) = (c.q1.clone(), c.q2.clone().unwrap());
        swapped.q1 = r2;
        swapped.q2 = Some(r1);
        let next = Matrix::from_rows(&[[0.3], [0.1]]);
        assert_eq!(td_targets(&c, &batch(), &next, 0.9).unwrap(), td_targets(&swapped, &batch(), &next, 0.9).unwrap());
    }

    #[test]
    fn terminal_rows_do_not_bootstrap() {
        let c = CriticNet::new(CriticConfig::new(3, vec![6], 3)).unwrap();
        let y = td_targets(&c, &batch(), &Matrix::from_rows(&[[0.3], [0.1]]), 0.9).unwrap();
        assert_eq!(y[1], -0.5);
    }
}

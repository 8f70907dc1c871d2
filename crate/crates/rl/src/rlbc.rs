//! Offline actor-critic with a flow actor and a likelihood behavior term.

use nfrl_core::flow::FlowModel;
use nfrl_core::grad::{Adam, AdamConfig, Matrix, ParamStore, StepOutcome, StoreId, Tape, Var};
use nfrl_core::objectives::{cosine_lr, noised};
use rand::Rng;

use crate::critic::{critic_update, state_contexts, CriticBatch, CriticNet};
use crate::data::ReplayBuffer;
use crate::error::{Result, RlError};

/// `λ` weights the policy log-density of its own actions, `α` the data log-likelihood.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActorLossWeights {
    pub lambda_ent: f64,
    pub alpha_bc: f64,
}

impl Default for ActorLossWeights {
    fn default() -> Self {
        Self { lambda_ent: 0.0, alpha_bc: ALPHA_PRESETS[0] }
    }
}

/// Behavior weights offered as presets.
pub const ALPHA_PRESETS: [f64; 2] = [1.0, 10.0];

#[derive(Debug, Clone, PartialEq)]
pub struct ActorBatch {
    pub states: Matrix,
    pub actions: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActorLossReport {
    pub loss: f64,
    /// `mean Q1(s, a^π)`.
    pub q_mean: f64,
    /// `mean log π(a^π|s)`.
    pub policy_log_prob: f64,
    /// `mean log π(a|s)` on the batch actions.
    pub data_log_prob: f64,
    pub grad: Vec<f64>,
}

/// A differentiable `Q(s, a)` the actor can be trained against.
pub trait ActionValue {
    /// Parameters the value reads, registered on the actor's tape.
    fn store(&self) -> Option<&ParamStore>;
    /// `B × 1` values for state rows `s` and action rows `a`.
    fn q_on(&self, tape: &mut Tape<'_>, store: Option<StoreId>, s: Var, a: Var) -> Result<Var>;
}

impl ActionValue for CriticNet {
    fn store(&self) -> Option<&ParamStore> {
        Some(&self.online)
    }

    fn q_on(&self, tape: &mut Tape<'_>, store: Option<StoreId>, s: Var, a: Var) -> Result<Var> {
        let store = store.ok_or_else(|| RlError::State("critic store not registered".into()))?;
        let a = match self.config.action_clip {
            Some(b) => tape.clamp(a, -b, b),
            None => a,
        };
        let input = tape.concat(&[s, a])?;
        Ok(self.q1.forward(tape, store, input)?)
    }
}

/// `−mean[Q(s, a^π) − λ log π(a^π|s)] − α mean[log π(a|s)]` with `a^π` the
/// image of the noise rows `z` under the actor's inverse map.
pub fn actor_loss<Q: ActionValue + ?Sized>(actor: &FlowModel, critic: &Q, batch: &ActorBatch, z: &Matrix, weights: ActorLossWeights) -> Result<ActorLossReport> {
    let rows = batch.states.rows();
    if rows == 0 || batch.actions.rows() != rows || z.rows() != rows {
        return Err(RlError::Config(format!("actor batch: {} states, {} actions, {} noise rows", rows, batch.actions.rows(), z.rows())));
    }
    let ctxs = state_contexts(&batch.states);
    let mut tape = Tape::new();
    let a_store = tape.add_store(actor.params());
    let c_store = critic.store().map(|p| tape.add_store(p));
    let enc = actor.encode_contexts(&mut tape, a_store, &ctxs, rows)?;
    let zv = tape.leaf(z.clone());
    let (a_pi, logp_pi) = actor.sample_on(&mut tape, a_store, zv, enc)?;
    let s = tape.leaf(batch.states.clone());
    let q = critic.q_on(&mut tape, c_store, s, a_pi)?;
    let q_mean = tape.mean(q)?;
    let ent_mean = tape.mean(logp_pi)?;
    let a = tape.leaf(batch.actions.clone());
    let lp = actor.log_prob_on(&mut tape, a_store, a, enc)?;
    let bc_mean = tape.mean(lp)?;
    let q_term = tape.scale(q_mean, -1.0);
    let ent_term = tape.scale(ent_mean, weights.lambda_ent);
    let bc_term = tape.scale(bc_mean, -weights.alpha_bc);
    let partial = tape.add(q_term, ent_term)?;
    let loss = tape.add(partial, bc_term)?;
    let value = tape.value(loss).get(0, 0);
    if !value.is_finite() {
        return Err(RlError::Core(nfrl_core::Error::NonFinite { location: "actor loss".into() }));
    }
    let report = (tape.value(q_mean).get(0, 0), tape.value(ent_mean).get(0, 0), tape.value(bc_mean).get(0, 0));
    let grads = tape.backward_scalar(loss)?;
    Ok(ActorLossReport { loss: value, q_mean: report.0, policy_log_prob: report.1, data_log_prob: report.2, grad: grads.into_params(a_store) })
}

/// One actor step: fresh prior noise, noised batch actions, Adam on the actor store only.
pub fn actor_update<Q: ActionValue + ?Sized, R: Rng>(
    actor: &mut FlowModel,
    adam: &mut Adam,
    critic: &Q,
    batch: &ActorBatch,
    weights: ActorLossWeights,
    noise_std: f64,
    lr: f64,
    rng: &mut R,
) -> Result<(ActorLossReport, bool)> {
    let z = actor.draw_noise(batch.states.rows(), rng);
    let noisy = ActorBatch { states: batch.states.clone(), actions: noised(&batch.actions, noise_std, rng) };
    let report = actor_loss(actor, critic, &noisy, &z, weights)?;
    let outcome = adam.step_with_lr(actor.params_mut(), &report.grad, lr)?;
    Ok((report, outcome == StepOutcome::Applied))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RlbcSettings {
    pub steps: usize,
    pub batch_size: usize,
    pub actor_lr: f64,
    pub actor_lr_final: f64,
    pub critic_lr: f64,
    pub gamma: f64,
    pub weights: ActorLossWeights,
    pub noise_std: f64,
}

impl Default for RlbcSettings {
    fn default() -> Self {
        Self { steps: 1_000_000, batch_size: 256, actor_lr: 3e-4, actor_lr_final: 3e-4, critic_lr: 3e-4, gamma: 0.99, weights: ActorLossWeights::default(), noise_std: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RlbcMetrics {
    pub critic_loss: f64,
    pub q_mean: f64,
    pub actor_loss: f64,
    pub data_log_prob: f64,
}

/// Alternating critic and actor steps on minibatches of the offline buffer.
pub fn train_rlbc<R: Rng>(
    actor: &mut FlowModel,
    critic: &mut CriticNet,
    buffer: &ReplayBuffer,
    settings: &RlbcSettings,
    rng: &mut R,
    mut on_step: impl FnMut(usize, &RlbcMetrics),
) -> Result<()> {
    let mut actor_adam = Adam::new(actor.num_params(), AdamConfig { lr: settings.actor_lr, ..AdamConfig::default() });
    let mut critic_adam = Adam::new(critic.num_params(), AdamConfig { lr: settings.critic_lr, ..AdamConfig::default() });
    for step in 0..settings.steps {
        let batch = CriticBatch::sample(buffer, settings.batch_size, rng)?;
        let c = critic_update(critic, &mut critic_adam, &batch, actor, settings.gamma, settings.critic_lr, rng)?;
        let lr = cosine_lr(step, settings.steps, settings.actor_lr, settings.actor_lr_final);
        let ab = ActorBatch { states: batch.states, actions: batch.actions };
        let (a, _) = actor_update(actor, &mut actor_adam, critic, &ab, settings.weights, settings.noise_std, lr, rng)?;
        on_step(step, &RlbcMetrics { critic_loss: c.loss, q_mean: c.q_mean, actor_loss: a.loss, data_log_prob: a.data_log_prob });
    }
    Ok(())
}

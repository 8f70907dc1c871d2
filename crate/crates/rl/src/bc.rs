//! Behavior cloning and goal-conditioned behavior cloning with flow policies.

use nfrl_core::flow::{ConditionContext, FlowConfig, FlowModel};
use nfrl_core::grad::{Adam, AdamConfig, Matrix, StepOutcome};
use nfrl_core::objectives::{cosine_lr, mle_loss, MleBatch};
use rand::Rng;

use crate::data::ReplayBuffer;
use crate::env::{ACTION_DIM, GOAL_DIM, STATE_DIM};
use crate::error::Result;
use crate::policy::PolicyInput;

/// Optimization settings shared by the supervised policy learners.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_final: f64,
    /// Std of the Gaussian noise added to target actions.
    pub noise_std: f64,
    /// Discount of the future-goal offset distribution.
    pub gamma_fut: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self { steps: 1_000_000, batch_size: 512, lr: 3e-4, lr_final: 3e-4, noise_std: 0.1, gamma_fut: 0.97 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateMetrics {
    pub loss: f64,
    /// False when the optimizer dropped the step for non-finite gradients.
    pub applied: bool,
}

/// Flow policy over actions conditioned on the state (and goal).
pub fn policy_flow(input: PolicyInput, blocks: usize, channels: usize, rep_dim: usize, seed: u64) -> Result<FlowModel> {
    Ok(FlowModel::new(FlowConfig::conditional(ACTION_DIM, input.cond_dim(), rep_dim, blocks, channels, seed))?)
}

/// `(s, a)` pairs drawn uniformly from the buffer's transitions.
pub fn bc_batch<R: Rng>(buffer: &ReplayBuffer, batch_size: usize, noise_std: f64, rng: &mut R) -> Result<MleBatch> {
    let mut x = Vec::with_capacity(batch_size * ACTION_DIM);
    let mut ctx = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let at = buffer.sample_transition(rng)?;
        x.extend_from_slice(buffer.action(at));
        ctx.push(ConditionContext::new(buffer.state(at)[..STATE_DIM].to_vec()));
    }
    Ok(MleBatch { x: Matrix::from_vec(batch_size, ACTION_DIM, x), ctx, noise_std })
}

/// `(s_t ‖ g, a_t)` with `g` the position at a truncated-geometric future offset of the same trajectory.
pub fn gcbc_batch<R: Rng>(buffer: &ReplayBuffer, batch_size: usize, gamma_fut: f64, noise_std: f64, rng: &mut R) -> Result<MleBatch> {
    let mut x = Vec::with_capacity(batch_size * ACTION_DIM);
    let mut ctx = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let at = buffer.sample_transition(rng)?;
        let g = buffer.sample_future_goal(at, gamma_fut, rng)?;
        x.extend_from_slice(buffer.action(at));
        let mut c = buffer.state(at)[..STATE_DIM].to_vec();
        c.extend_from_slice(&g[..GOAL_DIM]);
        ctx.push(ConditionContext::new(c));
    }
    Ok(MleBatch { x: Matrix::from_vec(batch_size, ACTION_DIM, x), ctx, noise_std })
}

/// One MLE step on `batch`; returns the pre-step NLL.
pub fn bc_update<R: Rng>(model: &mut FlowModel, adam: &mut Adam, batch: &MleBatch, lr: f64, rng: &mut R) -> Result<UpdateMetrics> {
    let report = mle_loss(model, batch, rng)?;
    let outcome = adam.step_with_lr(model.params_mut(), &report.grad, lr)?;
    Ok(UpdateMetrics { loss: report.loss, applied: outcome == StepOutcome::Applied })
}

pub fn gcbc_update<R: Rng>(model: &mut FlowModel, adam: &mut Adam, buffer: &ReplayBuffer, settings: &TrainSettings, lr: f64, rng: &mut R) -> Result<UpdateMetrics> {
    let batch = gcbc_batch(buffer, settings.batch_size, settings.gamma_fut, settings.noise_std, rng)?;
    bc_update(model, adam, &batch, lr, rng)
}

/// Full BC (or GCBC when the model is conditioned on state and goal) run with a cosine schedule.
pub fn train_bc<R: Rng>(
    model: &mut FlowModel,
    buffer: &ReplayBuffer,
    settings: &TrainSettings,
    rng: &mut R,
    mut on_step: impl FnMut(usize, &UpdateMetrics),
) -> Result<Vec<f64>> {
    let input = PolicyInput::from_cond_dim(model.cond_dim())?;
    let mut adam = Adam::new(model.num_params(), AdamConfig { lr: settings.lr, ..AdamConfig::default() });
    let mut losses = Vec::with_capacity(settings.steps);
    for step in 0..settings.steps {
        let lr = cosine_lr(step, settings.steps, settings.lr, settings.lr_final);
        let m = match input {
            PolicyInput::State => {
                let batch = bc_batch(buffer, settings.batch_size, settings.noise_std, rng)?;
                bc_update(model, &mut adam, &batch, lr, rng)?
            }
            PolicyInput::StateGoal => gcbc_update(model, &mut adam, buffer, settings, lr, rng)?,
        };
        on_step(step, &m);
        losses.push(m.loss);
    }
    Ok(losses)
}

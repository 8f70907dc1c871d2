//! Diagonal-Gaussian policy baseline trained by the same likelihood objective.

use nfrl_core::flow::ConditionContext;
use nfrl_core::grad::{Activation, Adam, AdamConfig, Matrix, Mlp, MlpSpec, OutputInit, ParamStore, Tape};
use nfrl_core::objectives::{cosine_lr, noised, LossReport, MleBatch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bc::{bc_batch, gcbc_batch, TrainSettings, UpdateMetrics};
use crate::data::ReplayBuffer;
use crate::env::ACTION_DIM;
use crate::error::{Result, RlError};
use crate::policy::{GaussianPolicy, PolicyInput};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

pub fn gaussian_policy(input: PolicyInput, hidden: &[usize], seed: u64) -> Result<GaussianPolicy> {
    let mut params = ParamStore::new(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = MlpSpec { in_dim: input.cond_dim(), hidden_dims: hidden.to_vec(), out_dim: 2 * ACTION_DIM, layernorm: true, activation: Activation::Gelu };
    let net = Mlp::build(spec, "gauss", &mut params, OutputInit::Zero, &mut rng)?;
    Ok(GaussianPolicy { net, params, input, stochastic: false })
}

/// Mean NLL of the (noised) batch actions under the diagonal Gaussian, with its parameter gradient.
pub fn gaussian_nll<R: Rng>(policy: &GaussianPolicy, batch: &MleBatch, rng: &mut R) -> Result<LossReport> {
    let rows = batch.x.rows();
    if rows == 0 || batch.ctx.len() != rows {
        return Err(RlError::Config(format!("{} actions with {} contexts", rows, batch.ctx.len())));
    }
    let a = noised(&batch.x, batch.noise_std, rng);
    let ctx: Vec<f64> = batch.ctx.iter().flat_map(|c: &ConditionContext| c.raw.iter().copied()).collect();
    let ctx = Matrix::from_vec(rows, policy.input.cond_dim(), ctx);
    let mut tape = Tape::new();
    let s = tape.add_store(&policy.params);
    let x = tape.leaf(ctx);
    let out = policy.net.forward(&mut tape, s, x)?;
    let mu = tape.columns(out, &[0, 1])?;
    let ls = tape.columns(out, &[2, 3])?;
    let ls = tape.clamp(ls, LOG_STD_MIN, LOG_STD_MAX);
    let neg = tape.scale(ls, -1.0);
    let inv_std = tape.exp(neg);
    let target = tape.leaf(a);
    let diff = tape.sub(target, mu)?;
    let zs = tape.mul(diff, inv_std)?;
    let sq = tape.square(zs);
    let half = tape.scale(sq, 0.5);
    let per_dim = tape.add(half, ls)?;
    let nll = tape.row_sum(per_dim);
    let nll = tape.shift(nll, ACTION_DIM as f64 * 0.5 * (2.0 * std::f64::consts::PI).ln());
    let loss = tape.mean(nll)?;
    let value = tape.value(loss).get(0, 0);
    if !value.is_finite() {
        return Err(RlError::Core(nfrl_core::Error::NonFiniteLoss { row: tape.value(nll).first_non_finite_row().unwrap_or(0) }));
    }
    let grads = tape.backward_scalar(loss)?;
    Ok(LossReport { loss: value, grad: grads.into_params(s) })
}

/// Same batches, schedule and noise as [`crate::bc::train_bc`].
pub fn train_gaussian<R: Rng>(policy: &mut GaussianPolicy, buffer: &ReplayBuffer, settings: &TrainSettings, rng: &mut R) -> Result<Vec<f64>> {
    let mut adam = Adam::new(policy.params.len(), AdamConfig { lr: settings.lr, ..AdamConfig::default() });
    let mut losses = Vec::with_capacity(settings.steps);
    for step in 0..settings.steps {
        let lr = cosine_lr(step, settings.steps, settings.lr, settings.lr_final);
        let batch = match policy.input {
            PolicyInput::State => bc_batch(buffer, settings.batch_size, settings.noise_std, rng)?,
            PolicyInput::StateGoal => gcbc_batch(buffer, settings.batch_size, settings.gamma_fut, settings.noise_std, rng)?,
        };
        let r = gaussian_nll(policy, &batch, rng)?;
        let outcome = adam.step_with_lr(&mut policy.params, &r.grad, lr)?;
        let m = UpdateMetrics { loss: r.loss, applied: outcome == nfrl_core::grad::StepOutcome::Applied };
        losses.push(m.loss);
    }
    Ok(losses)
}

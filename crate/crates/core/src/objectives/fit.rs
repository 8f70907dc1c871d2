use rand::Rng;

use super::{mle_loss, vi_loss, MleBatch, ViTarget};
use crate::error::{Error, Result};
use crate::flow::{ConditionContext, FlowModel};
use crate::grad::{Adam, AdamConfig, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct FitSettings {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate reached at the last step of the cosine schedule.
    pub lr_final: f64,
    pub noise_std: f64,
}

impl Default for FitSettings {
    fn default() -> Self {
        Self { steps: 1000, batch_size: 256, lr: 3e-4, lr_final: 3e-4, noise_std: 0.0 }
    }
}

/// Cosine interpolation from `lr` at step 0 to `lr_final` at the last step.
pub fn cosine_lr(step: usize, total: usize, lr: f64, lr_final: f64) -> f64 {
    if total <= 1 {
        return lr;
    }
    let t = step as f64 / (total - 1) as f64;
    lr_final + 0.5 * (lr - lr_final) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Minibatch MLE with Adam. Returns the loss of every step.
pub fn fit_mle<R: Rng>(model: &mut FlowModel, data: &Matrix, ctx: &[ConditionContext], settings: &FitSettings, rng: &mut R) -> Result<Vec<f64>> {
    if data.rows() == 0 {
        return Err(Error::Shape("empty training set".into()));
    }
    let conditional = model.config().is_conditional();
    if conditional && ctx.len() != data.rows() {
        return Err(Error::Shape(format!("{} contexts for {} rows", ctx.len(), data.rows())));
    }
    let mut adam = Adam::new(model.num_params(), AdamConfig { lr: settings.lr, ..AdamConfig::default() });
    let mut losses = Vec::with_capacity(settings.steps);
    for step in 0..settings.steps {
        let idx: Vec<usize> = (0..settings.batch_size).map(|_| rng.random_range(0..data.rows())).collect();
        let batch = MleBatch {
            x: data.select_rows(&idx),
            ctx: if conditional { idx.iter().map(|&i| ctx[i].clone()).collect() } else { Vec::new() },
            noise_std: settings.noise_std,
        };
        let report = mle_loss(model, &batch, rng)?;
        let lr = cosine_lr(step, settings.steps, settings.lr, settings.lr_final);
        adam.step_with_lr(model.params_mut(), &report.grad, lr)?;
        losses.push(report.loss);
    }
    Ok(losses)
}

/// Reverse-KL fitting of an unconditional model to `target`.
pub fn fit_vi<T: ViTarget + ?Sized, R: Rng>(model: &mut FlowModel, target: &T, settings: &FitSettings, rng: &mut R) -> Result<Vec<f64>> {
    let mut adam = Adam::new(model.num_params(), AdamConfig { lr: settings.lr, ..AdamConfig::default() });
    let mut losses = Vec::with_capacity(settings.steps);
    for step in 0..settings.steps {
        let report = vi_loss(model, target, settings.batch_size, rng)?;
        let lr = cosine_lr(step, settings.steps, settings.lr, settings.lr_final);
        adam.step_with_lr(model.params_mut(), &report.grad, lr)?;
        losses.push(report.loss);
    }
    Ok(losses)
}

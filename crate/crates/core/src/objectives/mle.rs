use rand::Rng;
use rand_distr::StandardNormal;

use super::LossReport;
use crate::error::{Error, Result};
use crate::flow::{ConditionContext, FlowModel};
use crate::grad::{Matrix, StoreId, Tape, Var};

#[derive(Debug, Clone)]
pub struct MleBatch {
    pub x: Matrix,
    /// One context per row; empty for unconditional models.
    pub ctx: Vec<ConditionContext>,
    /// Std of the Gaussian noise added to `x` each step (σ).
    pub noise_std: f64,
}

/// `x + σ·ε` with a fresh `ε ~ N(0, I)` per element. Draws nothing when `σ = 0`.
pub fn noised<R: Rng>(x: &Matrix, noise_std: f64, rng: &mut R) -> Matrix {
    if noise_std == 0.0 {
        return x.clone();
    }
    let data = x.as_slice().iter().map(|v| v + noise_std * rng.sample::<f64, _>(StandardNormal)).collect();
    Matrix::from_vec(x.rows(), x.cols(), data)
}

/// Records `log p(x | ctx)` (`B × 1`) for already-noised inputs on `tape`.
pub fn mle_log_prob_on(model: &FlowModel, tape: &mut Tape<'_>, store: StoreId, x: &Matrix, ctx: &[ConditionContext]) -> Result<Var> {
    if let Some(row) = x.first_non_finite_row() {
        return Err(Error::NonFiniteLoss { row });
    }
    let y = model.encode_contexts(tape, store, ctx, x.rows())?;
    let xv = tape.leaf(x.clone());
    model.log_prob_on(tape, store, xv, y)
}

/// `−mean log p(x + σε | ctx)` and its parameter gradient.
pub fn mle_loss<R: Rng>(model: &FlowModel, batch: &MleBatch, rng: &mut R) -> Result<LossReport> {
    if batch.x.rows() == 0 {
        return Err(Error::Shape("empty MLE batch".into()));
    }
    if !(batch.noise_std >= 0.0) {
        return Err(Error::Config(format!("noise_std must be ≥ 0, got {}", batch.noise_std)));
    }
    let x = noised(&batch.x, batch.noise_std, rng);
    let mut tape = Tape::new();
    let s = tape.add_store(model.params());
    let lp = mle_log_prob_on(model, &mut tape, s, &x, &batch.ctx)?;
    if let Some(row) = tape.value(lp).first_non_finite_row() {
        return Err(Error::NonFiniteLoss { row });
    }
    let mean = tape.mean(lp)?;
    let loss = tape.scale(mean, -1.0);
    let value = tape.value(loss).get(0, 0);
    let grads = tape.backward_scalar(loss)?;
    Ok(LossReport { loss: value, grad: grads.into_params(s) })
}

/// Draws `y` from the model and returns `y + σ²·∇_y log p(y | ctx)`.
///
/// Consumes exactly the randomness of one `sample` call.
pub fn denoised_sample<R: Rng>(model: &FlowModel, ctx: &ConditionContext, rng: &mut R, sigma: f64) -> Result<Vec<f64>> {
    let (y, _) = model.sample(ctx, rng)?;
    if sigma == 0.0 {
        return Ok(y);
    }
    let score = model.score_wrt_input(&y, ctx)?;
    Ok(y.iter().zip(&score).map(|(v, g)| v + sigma * sigma * g).collect())
}

/// Applies the denoising step to every row of `y`.
pub fn denoise_batch(model: &FlowModel, y: &Matrix, ctxs: &[ConditionContext], sigma: f64) -> Result<Matrix> {
    if sigma == 0.0 {
        return Ok(y.clone());
    }
    let score = model.score_batch(y, ctxs)?;
    let s2 = sigma * sigma;
    let data = y.as_slice().iter().zip(score.as_slice()).map(|(v, g)| v + s2 * g).collect();
    Ok(Matrix::from_vec(y.rows(), y.cols(), data))
}

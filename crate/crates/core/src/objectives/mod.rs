//! Batch losses for training flows: maximum likelihood with input noising,
//! reverse-KL variational inference, the denoising step used at sampling
//! time, and random conditioning masks.

mod fit;
mod mask;
mod mle;
mod vi;

pub use fit::{cosine_lr, fit_mle, fit_vi, FitSettings};
pub use mask::apply_mask;
pub use mle::{denoise_batch, denoised_sample, mle_loss, mle_log_prob_on, noised, MleBatch};
pub use vi::{vi_loss, vi_loss_from_noise, FnTarget, GaussianTarget, ViTarget};

/// Scalar loss plus its gradient over the model's flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub loss: f64,
    pub grad: Vec<f64>,
}

use rand::Rng;

use super::LossReport;
use crate::error::{Error, Result};
use crate::flow::{ConditionContext, FlowModel};
use crate::grad::{Matrix, Tape};

/// An unnormalized target density `p̃`.
pub trait ViTarget {
    fn dim(&self) -> usize;

    /// `log p̃(x)` per row of `x` and its gradient with respect to `x`.
    fn log_unnorm(&self, x: &Matrix) -> (Vec<f64>, Matrix);
}

/// Wraps a closure returning `(log p̃, ∇ log p̃)` for a single point.
pub struct FnTarget<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(&[f64]) -> (f64, Vec<f64>)> FnTarget<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F: Fn(&[f64]) -> (f64, Vec<f64>)> ViTarget for FnTarget<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_unnorm(&self, x: &Matrix) -> (Vec<f64>, Matrix) {
        let mut values = Vec::with_capacity(x.rows());
        let mut grad = Matrix::zeros(x.rows(), x.cols());
        for (r, row) in x.iter_rows().enumerate() {
            let (v, g) = (self.f)(row);
            values.push(v);
            grad.row_slice_mut(r).copy_from_slice(&g);
        }
        (values, grad)
    }
}

/// Isotropic Gaussian `N(mean, std²I)` without its normalizer.
#[derive(Debug, Clone)]
pub struct GaussianTarget {
    pub mean: Vec<f64>,
    pub std: f64,
}

impl ViTarget for GaussianTarget {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn log_unnorm(&self, x: &Matrix) -> (Vec<f64>, Matrix) {
        let inv_var = 1.0 / (self.std * self.std);
        let mut values = Vec::with_capacity(x.rows());
        let mut grad = Matrix::zeros(x.rows(), x.cols());
        for (r, row) in x.iter_rows().enumerate() {
            let mut acc = 0.0;
            for (c, (v, m)) in row.iter().zip(&self.mean).enumerate() {
                let diff = v - m;
                acc += diff * diff;
                grad.set(r, c, -diff * inv_var);
            }
            values.push(-0.5 * acc * inv_var);
        }
        (values, grad)
    }
}

/// Reverse-KL loss `−mean[log p̃(x) − log p₀(z) + log|det ∂f⁻¹/∂z|]` with
/// `x = f⁻¹(z)` and fresh prior draws `z`.
pub fn vi_loss<T: ViTarget + ?Sized, R: Rng>(model: &FlowModel, target: &T, batch_size: usize, rng: &mut R) -> Result<LossReport> {
    if batch_size == 0 {
        return Err(Error::Shape("VI batch size must be ≥ 1".into()));
    }
    let z = model.draw_noise(batch_size, rng);
    vi_loss_from_noise(model, target, &z)
}

/// [`vi_loss`] for given prior draws.
pub fn vi_loss_from_noise<T: ViTarget + ?Sized>(model: &FlowModel, target: &T, z: &Matrix) -> Result<LossReport> {
    if model.config().is_conditional() {
        return Err(Error::Config("vi_loss expects an unconditional model".into()));
    }
    if target.dim() != model.dim() {
        return Err(Error::Shape(format!("target dimension {} for a flow of dimension {}", target.dim(), model.dim())));
    }
    let mut tape = Tape::new();
    let s = tape.add_store(model.params());
    let zv = tape.leaf(z.clone());
    let y = model.encode_contexts(&mut tape, s, &[] as &[ConditionContext], z.rows())?;
    let (x, log_q) = model.sample_on(&mut tape, s, zv, y)?;
    let (values, grad) = target.log_unnorm(tape.value(x));
    if let Some(row) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteLoss { row });
    }
    if let Some(row) = grad.first_non_finite_row() {
        return Err(Error::NonFiniteLoss { row });
    }
    let log_p = tape.external(x, values, grad)?;
    let gap = tape.sub(log_q, log_p)?;
    let loss = tape.mean(gap)?;
    let value = tape.value(loss).get(0, 0);
    let grads = tape.backward_scalar(loss)?;
    Ok(LossReport { loss: value, grad: grads.into_params(s) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{FlowConfig, PermutationInit};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_model() -> FlowModel {
        let mut c = FlowConfig::unconditional(2, 2, 8, 1);
        c.permutation = PermutationInit::Identity;
        FlowModel::new(c).unwrap()
    }

    #[test]
    fn prior_target_has_zero_loss_per_draw() {
        let m = identity_model();
        let prior = GaussianTarget { mean: vec![0.0, 0.0], std: 1.0 };
        let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        let r = vi_loss(&m, &prior, 64, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        // p̃ drops the normalizer, so q = p leaves exactly log Z = d/2·log 2π
        assert!((r.loss + 2.0 * half_log_2pi).abs() < 1e-12);
    }

    #[test]
    fn fn_target_matches_gaussian_target() {
        let m = identity_model();
        let g = GaussianTarget { mean: vec![1.0, -1.0], std: 2.0 };
        let f = FnTarget::new(2, |x: &[f64]| {
            let d = [x[0] - 1.0, x[1] + 1.0];
            (-(d[0] * d[0] + d[1] * d[1]) / 8.0, vec![-d[0] / 4.0, -d[1] / 4.0])
        });
        let a = vi_loss(&m, &g, 16, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = vi_loss(&m, &f, 16, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert!((a.loss - b.loss).abs() < 1e-12);
        for (x, y) in a.grad.iter().zip(&b.grad) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_target_is_an_error() {
        let m = identity_model();
        let bad = FnTarget::new(2, |_x: &[f64]| (f64::NAN, vec![0.0, 0.0]));
        assert!(matches!(vi_loss(&m, &bad, 4, &mut ChaCha8Rng::seed_from_u64(0)), Err(Error::NonFiniteLoss { row: 0 })));
    }
}

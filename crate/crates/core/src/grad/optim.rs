use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// Gradients contained NaN/inf; parameters and moments were left untouched.
    Skipped,
}

/// Adam moments for one parameter store.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n_params: usize, config: AdamConfig) -> Self {
        Self { config, m: vec![0.0; n_params], v: vec![0.0; n_params], t: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[f64]) -> Result<StepOutcome> {
        self.step_with_lr(params, grads, self.config.lr)
    }

    pub fn step_with_lr(&mut self, params: &mut ParamStore, grads: &[f64], lr: f64) -> Result<StepOutcome> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Shape(format!(
                "optimizer over {} moments, {} params, {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            log::warn!(
                "skipping optimizer step: non-finite gradient at index {i} ({})",
                params.owner_of(i).unwrap_or("?")
            );
            return Ok(StepOutcome::Skipped);
        }
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        self.t += 1;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (((p, &g), m), v) in params.values_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
        }
        Ok(StepOutcome::Applied)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParamStore {
        let mut p = ParamStore::new(0);
        p.alloc("theta", 1);
        p.values_mut()[0] = v;
        p
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = scalar_store(0.7);
        let mut opt = Adam::new(1, AdamConfig::default());
        for _ in 0..10 {
            opt.step(&mut p, &[0.0]).unwrap();
        }
        assert_eq!(p.values()[0], 0.7);
    }

    #[test]
    fn constant_gradient_moves_opposite_its_sign() {
        let mut p = scalar_store(0.0);
        let mut opt = Adam::new(1, AdamConfig { lr: 1e-2, ..Default::default() });
        let mut prev = 0.0;
        for _ in 0..50 {
            opt.step(&mut p, &[2.5]).unwrap();
            assert!(p.values()[0] < prev);
            prev = p.values()[0];
        }
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut p = scalar_store(1.0);
        let mut opt = Adam::new(1, AdamConfig { lr: 1e-2, ..Default::default() });
        for _ in 0..2000 {
            let g = 2.0 * p.values()[0];
            opt.step(&mut p, &[g]).unwrap();
        }
        assert!(p.values()[0].abs() < 1e-3, "theta = {}", p.values()[0]);
    }

    #[test]
    fn non_finite_gradient_skips_step() {
        let mut p = scalar_store(1.0);
        let mut opt = Adam::new(1, AdamConfig::default());
        assert_eq!(opt.step(&mut p, &[f64::NAN]).unwrap(), StepOutcome::Skipped);
        assert_eq!(p.values()[0], 1.0);
        assert_eq!(opt.steps_taken(), 0);
    }
}

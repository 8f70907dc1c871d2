use crate::error::{Error, Result};
use crate::grad::Matrix;

/// Raw conditioning vector plus the mask flag.
///
/// A masked context is fed to the encoder as zeros with flag 1, so the
/// model evaluates the marginal density no matter what `raw` holds.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionContext {
    pub raw: Vec<f64>,
    pub masked: bool,
}

impl ConditionContext {
    pub fn new(raw: Vec<f64>) -> Self {
        Self { raw, masked: false }
    }

    pub fn masked(width: usize) -> Self {
        Self { raw: vec![0.0; width], masked: true }
    }

    pub fn empty() -> Self {
        Self { raw: Vec::new(), masked: false }
    }

    /// Encoder input row: `raw ‖ 0` or `0 ‖ 1`.
    pub fn encoder_input(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.raw.len() + 1);
        if self.masked {
            v.resize(self.raw.len(), 0.0);
            v.push(1.0);
        } else {
            v.extend_from_slice(&self.raw);
            v.push(0.0);
        }
        v
    }
}

/// Stacks encoder inputs for a batch of contexts of width `cond_dim`.
pub fn encoder_batch(ctxs: &[ConditionContext], cond_dim: usize) -> Result<Matrix> {
    let mut data = Vec::with_capacity(ctxs.len() * (cond_dim + 1));
    for (i, c) in ctxs.iter().enumerate() {
        if c.raw.len() != cond_dim {
            return Err(Error::Shape(format!("context {i} has width {}, model expects {cond_dim}", c.raw.len())));
        }
        data.extend(c.encoder_input());
    }
    Ok(Matrix::from_vec(ctxs.len(), cond_dim + 1, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_zeroes_raw_and_sets_flag() {
        let c = ConditionContext { raw: vec![3.0, -1.0], masked: true };
        assert_eq!(c.encoder_input(), vec![0.0, 0.0, 1.0]);
        let c = ConditionContext::new(vec![3.0, -1.0]);
        assert_eq!(c.encoder_input(), vec![3.0, -1.0, 0.0]);
    }
}

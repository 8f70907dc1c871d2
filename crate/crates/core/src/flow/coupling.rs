//! Conditional affine coupling.
//!
//! Forward: `x̃₂ = (x₂ + a(x₁, y)) · exp(−s(x₁, y))`, passthrough half `x₁`
//! unchanged, log-det `−Σ s`. Inverse: `x₂ = x̃₂ · exp(s) − a`.

use rand::Rng;

use crate::error::Result;
use crate::grad::{Activation, Mlp, MlpSpec, OutputInit, ParamStore, StoreId, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitParity {
    /// Pass the first `⌊d/2⌋` coordinates through, transform the rest.
    LowFirst,
    /// Pass the last `⌊d/2⌋` coordinates through, transform the first `⌈d/2⌉`.
    HighFirst,
}

impl SplitParity {
    pub fn for_block(t: usize) -> Self {
        if t % 2 == 0 {
            SplitParity::LowFirst
        } else {
            SplitParity::HighFirst
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SplitParity::LowFirst => "low",
            SplitParity::HighFirst => "high",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "low" => Some(SplitParity::LowFirst),
            "high" => Some(SplitParity::HighFirst),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingBlock {
    shift: Mlp,
    log_scale: Mlp,
    parity: SplitParity,
    pass_idx: Vec<usize>,
    xform_idx: Vec<usize>,
    /// Position of each original coordinate inside `[pass ‖ xform]`.
    merge_idx: Vec<usize>,
    clamp: f64,
}

pub struct CouplingSpec {
    pub dim: usize,
    pub rep_dim: usize,
    pub hidden: Vec<usize>,
    pub layernorm: bool,
    pub activation: Activation,
    pub clamp: f64,
}

impl CouplingBlock {
    /// Allocates both nets with zero-initialized output layers, so a fresh
    /// block is the identity map.
    pub fn build<R: Rng>(spec: &CouplingSpec, parity: SplitParity, prefix: &str, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        let d = spec.dim;
        let (n_pass, n_xform) = (d / 2, d - d / 2);
        let (pass_idx, xform_idx): (Vec<usize>, Vec<usize>) = match parity {
            SplitParity::LowFirst => ((0..n_pass).collect(), (n_pass..d).collect()),
            SplitParity::HighFirst => ((n_xform..d).collect(), (0..n_xform).collect()),
        };
        let mut merge_idx = vec![0; d];
        for (k, &i) in pass_idx.iter().chain(&xform_idx).enumerate() {
            merge_idx[i] = k;
        }
        let net = MlpSpec {
            in_dim: n_pass + spec.rep_dim,
            hidden_dims: spec.hidden.clone(),
            out_dim: n_xform,
            layernorm: spec.layernorm,
            activation: spec.activation,
        };
        let shift = Mlp::build(net.clone(), &format!("{prefix}.shift"), store, OutputInit::Zero, rng)?;
        let log_scale = Mlp::build(net, &format!("{prefix}.log_scale"), store, OutputInit::Zero, rng)?;
        Ok(Self { shift, log_scale, parity, pass_idx, xform_idx, merge_idx, clamp: spec.clamp })
    }

    pub fn parity(&self) -> SplitParity {
        self.parity
    }

    pub fn shift_net(&self) -> &Mlp {
        &self.shift
    }

    pub fn log_scale_net(&self) -> &Mlp {
        &self.log_scale
    }

    fn conditioner(&self, tape: &mut Tape<'_>, store: StoreId, x1: Var, y: Option<Var>) -> Result<(Var, Var)> {
        let h = match y {
            Some(y) => tape.concat(&[x1, y])?,
            None => x1,
        };
        let a = self.shift.forward(tape, store, h)?;
        let s_raw = self.log_scale.forward(tape, store, h)?;
        let s = tape.clamp(s_raw, -self.clamp, self.clamp);
        Ok((a, s))
    }

    /// Returns `(x̃, log_det)` with `log_det` a `B × 1` column.
    pub fn forward_on(&self, tape: &mut Tape<'_>, store: StoreId, x: Var, y: Option<Var>) -> Result<(Var, Var)> {
        let x1 = tape.columns(x, &self.pass_idx)?;
        let x2 = tape.columns(x, &self.xform_idx)?;
        let (a, s) = self.conditioner(tape, store, x1, y)?;
        let shifted = tape.add(x2, a)?;
        let neg_s = tape.scale(s, -1.0);
        let factor = tape.exp(neg_s);
        let x2t = tape.mul(shifted, factor)?;
        let joined = tape.concat(&[x1, x2t])?;
        let out = tape.columns(joined, &self.merge_idx)?;
        let sum_s = tape.row_sum(s);
        let log_det = tape.scale(sum_s, -1.0);
        Ok((out, log_det))
    }

    /// Returns `(x, log_det)` where `log_det = Σ s` is the log-det of the inverse map.
    pub fn inverse_on(&self, tape: &mut Tape<'_>, store: StoreId, x_tilde: Var, y: Option<Var>) -> Result<(Var, Var)> {
        let x1 = tape.columns(x_tilde, &self.pass_idx)?;
        let x2t = tape.columns(x_tilde, &self.xform_idx)?;
        let (a, s) = self.conditioner(tape, store, x1, y)?;
        let factor = tape.exp(s);
        let scaled = tape.mul(x2t, factor)?;
        let x2 = tape.sub(scaled, a)?;
        let joined = tape.concat(&[x1, x2])?;
        let out = tape.columns(joined, &self.merge_idx)?;
        let log_det = tape.row_sum(s);
        Ok((out, log_det))
    }
}

//! Fully connected networks laid out inside a [`ParamStore`].
//!
//! Hidden layers are `affine → LayerNorm (optional) → activation`; the output
//! layer is affine only.

use rand::Rng;

use super::matrix::Matrix;
use super::params::ParamStore;
use super::tape::{Activation, StoreId, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    pub in_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub out_dim: usize,
    pub layernorm: bool,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.out_dim == 0 || self.hidden_dims.iter().any(|&h| h == 0) {
            return Err(Error::Config(format!("all MLP dimensions must be ≥ 1, got {self:?}")));
        }
        Ok(())
    }

    /// Number of scalars the network occupies in a store.
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        let mut prev = self.in_dim;
        for &h in &self.hidden_dims {
            n += prev * h + h + if self.layernorm { 2 * h } else { 0 };
            prev = h;
        }
        n + prev * self.out_dim + self.out_dim
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputInit {
    /// He-uniform like the hidden layers.
    He,
    /// All-zero weights and bias.
    Zero,
}

#[derive(Debug, Clone, PartialEq)]
struct LayerSlots {
    name: String,
    w: usize,
    b: usize,
    out: usize,
    ln_gain: Option<usize>,
}

/// An MLP whose weights live at fixed offsets of a store.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<LayerSlots>,
}

impl Mlp {
    /// Allocates the network's slices in `store` (named `{prefix}.l{i}.w` etc.)
    /// and initializes them.
    pub fn build<R: Rng>(spec: MlpSpec, prefix: &str, store: &mut ParamStore, output_init: OutputInit, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::new();
        let mut prev = spec.in_dim;
        let n_layers = spec.hidden_dims.len() + 1;
        for i in 0..n_layers {
            let is_out = i == n_layers - 1;
            let out = if is_out { spec.out_dim } else { spec.hidden_dims[i] };
            let name = format!("{prefix}.l{i}");
            let w = store.alloc(format!("{name}.w"), out * prev);
            let b = store.alloc(format!("{name}.b"), out);
            let ln_gain = if !is_out && spec.layernorm {
                let g = store.alloc(format!("{name}.ln.g"), out);
                store.alloc(format!("{name}.ln.b"), out);
                store.values_mut()[g..g + out].iter_mut().for_each(|v| *v = 1.0);
                Some(g)
            } else {
                None
            };
            if !(is_out && output_init == OutputInit::Zero) {
                // He-uniform: U(−√(6/fan_in), √(6/fan_in))
                let bound = (6.0 / prev as f64).sqrt();
                for v in &mut store.values_mut()[w..w + out * prev] {
                    *v = rng.random_range(-bound..bound);
                }
            }
            layers.push(LayerSlots { name, w, b, out, ln_gain });
            prev = out;
        }
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn in_dim(&self) -> usize {
        self.spec.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.spec.out_dim
    }

    /// Offsets of the output layer `(weight, bias)`.
    pub fn output_slots(&self) -> (usize, usize) {
        let l = self.layers.last().expect("an MLP has at least one layer");
        (l.w, l.b)
    }

    /// Batched forward pass recorded on `tape`.
    pub fn forward(&self, tape: &mut Tape<'_>, store: StoreId, x: Var) -> Result<Var> {
        let width = tape.value(x).cols();
        if width != self.spec.in_dim {
            return Err(Error::Shape(format!("MLP expects input width {}, got {width}", self.spec.in_dim)));
        }
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = tape.linear(h, store, layer.w, layer.b, layer.out)?;
            if i < last {
                if let Some(g) = layer.ln_gain {
                    h = tape.layer_norm(h, store, g, g + layer.out)?;
                }
                h = tape.activation(h, self.spec.activation);
            }
            if !tape.value(h).is_finite() {
                return Err(Error::NonFinite { location: format!("layer {}", layer.name) });
            }
        }
        Ok(h)
    }

    /// Single-vector evaluation without keeping a tape around.
    pub fn eval(&self, store: &ParamStore, x: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let s = tape.add_store(store);
        let xv = tape.leaf(Matrix::row(x));
        let y = self.forward(&mut tape, s, xv)?;
        Ok(tape.value(y).as_slice().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(in_dim: usize, hidden: &[usize], out_dim: usize, layernorm: bool) -> MlpSpec {
        MlpSpec { in_dim, hidden_dims: hidden.to_vec(), out_dim, layernorm, activation: Activation::Gelu }
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new(1);
        let mlp = Mlp::build(spec(3, &[5, 4], 2, false), "m", &mut store, OutputInit::He, &mut rng).unwrap();
        store.values_mut().iter_mut().for_each(|v| *v = 0.0);
        assert_eq!(mlp.eval(&store, &[0.3, -1.0, 2.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_linear_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new(1);
        let mlp = Mlp::build(spec(2, &[], 2, false), "m", &mut store, OutputInit::Zero, &mut rng).unwrap();
        store.slice_values_mut("m.l0.w").unwrap().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(mlp.eval(&store, &[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn param_count_matches_allocation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new(3);
        let s = spec(4, &[8, 6], 3, true);
        Mlp::build(s.clone(), "m", &mut store, OutputInit::He, &mut rng).unwrap();
        assert_eq!(store.len(), s.param_count());
    }

    #[test]
    fn wrong_input_width_is_shape_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new(1);
        let mlp = Mlp::build(spec(2, &[4], 1, false), "m", &mut store, OutputInit::He, &mut rng).unwrap();
        assert!(matches!(mlp.eval(&store, &[1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_dim_rejected() {
        assert!(spec(0, &[4], 1, false).validate().is_err());
        assert!(spec(2, &[0], 1, false).validate().is_err());
    }

    #[test]
    fn overflow_names_the_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new(1);
        let mlp = Mlp::build(spec(1, &[2], 1, false), "enc", &mut store, OutputInit::He, &mut rng).unwrap();
        store.slice_values_mut("enc.l0.w").unwrap().copy_from_slice(&[1e308, 1e308]);
        match mlp.eval(&store, &[10.0]) {
            Err(Error::NonFinite { location }) => assert!(location.contains("enc.l0"), "{location}"),
            other => panic!("expected overflow error, got {other:?}"),
        }
    }
}

//! Stacked conditional flow with a standard-normal prior.
//!
//! Data → noise: for each block `t`, coupling then linear flow. Sampling runs
//! the inverse chain in reverse block order. All passes are recorded on a
//! [`Tape`], so gradients flow to parameters and to inputs in both directions.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::context::{encoder_batch, ConditionContext};
use super::coupling::{CouplingBlock, CouplingSpec, SplitParity};
use super::linear::LinearFlow;
use crate::error::{Error, Result};
use crate::grad::{read_checkpoint, write_checkpoint, Activation, Matrix, Mlp, MlpSpec, OutputInit, ParamStore, StoreId, Tape, Var};
use crate::kv::KvText;

/// Rows evaluated per tape when a caller hands over a large batch.
const EVAL_CHUNK: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PermutationInit {
    Random,
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowConfig {
    /// Event dimension `d` (≥ 2).
    pub dim: usize,
    /// Width of the raw conditioning vector; 0 for an unconditional model.
    pub cond_dim: usize,
    /// Encoder output width `k`.
    pub rep_dim: usize,
    pub blocks: usize,
    /// Width of each hidden layer of the coupling nets.
    pub channels: usize,
    pub coupling_layers: usize,
    pub encoder_layers: usize,
    pub encoder_width: usize,
    pub layernorm: bool,
    pub activation: Activation,
    pub permutation: PermutationInit,
    pub log_scale_clamp: f64,
    pub seed: u64,
}

impl FlowConfig {
    pub fn unconditional(dim: usize, blocks: usize, channels: usize, seed: u64) -> Self {
        Self {
            dim,
            cond_dim: 0,
            rep_dim: 0,
            blocks,
            channels,
            coupling_layers: 2,
            encoder_layers: 0,
            encoder_width: 0,
            layernorm: true,
            activation: Activation::Gelu,
            permutation: PermutationInit::Random,
            log_scale_clamp: 7.0,
            seed,
        }
    }

    pub fn conditional(dim: usize, cond_dim: usize, rep_dim: usize, blocks: usize, channels: usize, seed: u64) -> Self {
        Self {
            cond_dim,
            rep_dim,
            encoder_layers: 2,
            encoder_width: channels,
            ..Self::unconditional(dim, blocks, channels, seed)
        }
    }

    pub fn is_conditional(&self) -> bool {
        self.cond_dim > 0
    }

    fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::Config(format!("coupling flows need d ≥ 2, got {}", self.dim)));
        }
        if self.is_conditional() && self.rep_dim == 0 {
            return Err(Error::Config("conditional model needs rep_dim ≥ 1".into()));
        }
        if self.encoder_layers > 0 && self.encoder_width == 0 && self.is_conditional() {
            return Err(Error::Config("encoder_width must be ≥ 1".into()));
        }
        if self.coupling_layers > 0 && self.channels == 0 {
            return Err(Error::Config("channels must be ≥ 1".into()));
        }
        if !(self.log_scale_clamp > 0.0) {
            return Err(Error::Config("log_scale_clamp must be positive".into()));
        }
        Ok(())
    }

    fn effective_rep_dim(&self) -> usize {
        if self.is_conditional() {
            self.rep_dim
        } else {
            0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowBlock {
    pub coupling: CouplingBlock,
    pub linear: LinearFlow,
}

/// Output of a full pass through the flow.
#[derive(Debug, Clone, Copy)]
pub struct FlowPass {
    pub out: Var,
    /// `B × 1` accumulated log-det of the direction that was run.
    pub log_det: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    config: FlowConfig,
    params: ParamStore,
    encoder: Option<Mlp>,
    blocks: Vec<FlowBlock>,
}

impl FlowModel {
    pub fn new(config: FlowConfig) -> Result<Self> {
        config.validate()?;
        let mut perm_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5DEE_CE66_D1CE_4E5B);
        let perms = (0..config.blocks)
            .map(|_| {
                let mut p: Vec<usize> = (0..config.dim).collect();
                if config.permutation == PermutationInit::Random {
                    p.shuffle(&mut perm_rng);
                }
                p
            })
            .collect();
        Self::with_permutations(config, perms)
    }

    fn with_permutations(config: FlowConfig, perms: Vec<Vec<usize>>) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new(config.seed);
        let encoder = if config.is_conditional() {
            let spec = MlpSpec {
                in_dim: config.cond_dim + 1,
                hidden_dims: vec![config.encoder_width; config.encoder_layers],
                out_dim: config.rep_dim,
                layernorm: config.layernorm,
                activation: config.activation,
            };
            Some(Mlp::build(spec, "enc", &mut params, OutputInit::He, &mut rng)?)
        } else {
            None
        };
        let cspec = CouplingSpec {
            dim: config.dim,
            rep_dim: config.effective_rep_dim(),
            hidden: vec![config.channels; config.coupling_layers],
            layernorm: config.layernorm,
            activation: config.activation,
            clamp: config.log_scale_clamp,
        };
        let mut blocks = Vec::with_capacity(config.blocks);
        for (t, perm) in perms.into_iter().enumerate() {
            if perm.len() != config.dim {
                return Err(Error::Config(format!("block {t}: permutation of length {} for d={}", perm.len(), config.dim)));
            }
            let coupling = CouplingBlock::build(&cspec, SplitParity::for_block(t), &format!("block{t}"), &mut params, &mut rng)?;
            let linear = LinearFlow::build(perm, &format!("block{t}"), &mut params)?;
            blocks.push(FlowBlock { coupling, linear });
        }
        Ok(Self { config, params, encoder, blocks })
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn cond_dim(&self) -> usize {
        self.config.cond_dim
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn blocks(&self) -> &[FlowBlock] {
        &self.blocks
    }

    pub fn encoder(&self) -> Option<&Mlp> {
        self.encoder.as_ref()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn check_nonsingular(&self) -> Result<()> {
        for (t, b) in self.blocks.iter().enumerate() {
            if let Some((index, value)) = b.linear.singular_index(&self.params) {
                return Err(Error::Singular { block: t, index, value });
            }
        }
        Ok(())
    }

    // ---- tape-level API -------------------------------------------------

    /// Encoder input matrix for a batch of contexts, or `None` for unconditional models.
    pub fn encoder_inputs(&self, ctxs: &[ConditionContext], rows: usize) -> Result<Option<Matrix>> {
        if !self.config.is_conditional() {
            return Ok(None);
        }
        if ctxs.len() != rows {
            return Err(Error::Shape(format!("{} contexts for {rows} rows", ctxs.len())));
        }
        encoder_batch(ctxs, self.config.cond_dim).map(Some)
    }

    /// Runs the conditioner encoder on an encoder-input node (`raw ‖ flag`).
    pub fn encode_on(&self, tape: &mut Tape<'_>, store: StoreId, enc_in: Option<Var>) -> Result<Option<Var>> {
        match (&self.encoder, enc_in) {
            (Some(enc), Some(v)) => enc.forward(tape, store, v).map(Some),
            (None, _) => Ok(None),
            (Some(_), None) => Err(Error::Shape("conditional model evaluated without a context".into())),
        }
    }

    /// Registers the model's store and encodes `ctxs` on a fresh section of `tape`.
    pub fn encode_contexts(&self, tape: &mut Tape<'_>, store: StoreId, ctxs: &[ConditionContext], rows: usize) -> Result<Option<Var>> {
        let inputs = self.encoder_inputs(ctxs, rows)?;
        let enc_in = inputs.map(|m| tape.leaf(m));
        self.encode_on(tape, store, enc_in)
    }

    /// Data → noise. `log_det` is `log|det ∂z/∂x|` per row.
    pub fn forward_on(&self, tape: &mut Tape<'_>, store: StoreId, x: Var, y: Option<Var>) -> Result<FlowPass> {
        self.check_width(tape, x)?;
        self.check_nonsingular()?;
        let rows = tape.value(x).rows();
        let mut h = x;
        let mut log_det = tape.leaf(Matrix::zeros(rows, 1));
        for (t, b) in self.blocks.iter().enumerate() {
            let (c, ld_c) = b.coupling.forward_on(tape, store, h, y).map_err(|e| at_block(e, t))?;
            let (l, ld_l) = b.linear.forward_on(tape, store, c)?;
            log_det = tape.add(log_det, ld_c)?;
            log_det = tape.add(log_det, ld_l)?;
            h = l;
            if !tape.value(h).is_finite() || !tape.value(log_det).is_finite() {
                return Err(Error::NonFinite { location: format!("block {t} forward") });
            }
        }
        Ok(FlowPass { out: h, log_det })
    }

    /// Noise → data. `log_det` is `log|det ∂x/∂z|` per row.
    pub fn inverse_on(&self, tape: &mut Tape<'_>, store: StoreId, z: Var, y: Option<Var>) -> Result<FlowPass> {
        self.check_width(tape, z)?;
        self.check_nonsingular()?;
        let rows = tape.value(z).rows();
        let mut h = z;
        let mut log_det = tape.leaf(Matrix::zeros(rows, 1));
        for (t, b) in self.blocks.iter().enumerate().rev() {
            let (l, ld_l) = b.linear.inverse_on(tape, store, h)?;
            let (c, ld_c) = b.coupling.inverse_on(tape, store, l, y).map_err(|e| at_block(e, t))?;
            log_det = tape.add(log_det, ld_l)?;
            log_det = tape.add(log_det, ld_c)?;
            h = c;
            if !tape.value(h).is_finite() || !tape.value(log_det).is_finite() {
                return Err(Error::NonFinite { location: format!("block {t} inverse") });
            }
        }
        Ok(FlowPass { out: h, log_det })
    }

    /// `log N(f(x); 0, I) + log|det ∂f/∂x|`, a `B × 1` column.
    pub fn log_prob_on(&self, tape: &mut Tape<'_>, store: StoreId, x: Var, y: Option<Var>) -> Result<Var> {
        let pass = self.forward_on(tape, store, x, y)?;
        let prior = std_normal_log_density_on(tape, pass.out);
        tape.add(prior, pass.log_det)
    }

    /// Maps prior draws `z` to samples. Returns `(x, log p(x))`.
    pub fn sample_on(&self, tape: &mut Tape<'_>, store: StoreId, z: Var, y: Option<Var>) -> Result<(Var, Var)> {
        let pass = self.inverse_on(tape, store, z, y)?;
        let prior = std_normal_log_density_on(tape, z);
        let log_prob = tape.sub(prior, pass.log_det)?;
        Ok((pass.out, log_prob))
    }

    fn check_width(&self, tape: &Tape<'_>, x: Var) -> Result<()> {
        let w = tape.value(x).cols();
        if w != self.config.dim {
            return Err(Error::Shape(format!("flow of dimension {} got input width {w}", self.config.dim)));
        }
        Ok(())
    }

    // ---- value-level API ------------------------------------------------

    /// Log-density of each row of `xs` under its context.
    pub fn log_prob_batch(&self, xs: &Matrix, ctxs: &[ConditionContext]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(xs.rows());
        for start in (0..xs.rows()).step_by(EVAL_CHUNK) {
            let end = (start + EVAL_CHUNK).min(xs.rows());
            let idx: Vec<usize> = (start..end).collect();
            let chunk_ctx = if self.config.is_conditional() {
                if ctxs.len() != xs.rows() {
                    return Err(Error::Shape(format!("{} contexts for {} rows", ctxs.len(), xs.rows())));
                }
                &ctxs[start..end]
            } else {
                &[]
            };
            let mut tape = Tape::new();
            let s = tape.add_store(&self.params);
            let y = self.encode_contexts(&mut tape, s, chunk_ctx, idx.len())?;
            let x = tape.leaf(xs.select_rows(&idx));
            let lp = self.log_prob_on(&mut tape, s, x, y)?;
            out.extend_from_slice(tape.value(lp).as_slice());
        }
        Ok(out)
    }

    pub fn log_prob(&self, x: &[f64], ctx: &ConditionContext) -> Result<f64> {
        Ok(self.log_prob_batch(&Matrix::row(x), std::slice::from_ref(ctx))?[0])
    }

    /// `(f(x), log|det ∂f/∂x|)`.
    pub fn forward(&self, x: &[f64], ctx: &ConditionContext) -> Result<(Vec<f64>, f64)> {
        let mut tape = Tape::new();
        let s = tape.add_store(&self.params);
        let y = self.encode_contexts(&mut tape, s, std::slice::from_ref(ctx), 1)?;
        let xv = tape.leaf(Matrix::row(x));
        let pass = self.forward_on(&mut tape, s, xv, y)?;
        Ok((tape.value(pass.out).as_slice().to_vec(), tape.value(pass.log_det).get(0, 0)))
    }

    /// `(f⁻¹(z), log|det ∂f⁻¹/∂z|)`.
    pub fn inverse(&self, z: &[f64], ctx: &ConditionContext) -> Result<(Vec<f64>, f64)> {
        let mut tape = Tape::new();
        let s = tape.add_store(&self.params);
        let y = self.encode_contexts(&mut tape, s, std::slice::from_ref(ctx), 1)?;
        let zv = tape.leaf(Matrix::row(z));
        let pass = self.inverse_on(&mut tape, s, zv, y)?;
        Ok((tape.value(pass.out).as_slice().to_vec(), tape.value(pass.log_det).get(0, 0)))
    }

    /// Maps given prior draws (one row per context) to samples and their log-densities.
    pub fn sample_from_noise(&self, z: &Matrix, ctxs: &[ConditionContext]) -> Result<(Matrix, Vec<f64>)> {
        let mut tape = Tape::new();
        let s = tape.add_store(&self.params);
        let y = self.encode_contexts(&mut tape, s, ctxs, z.rows())?;
        let zv = tape.leaf(z.clone());
        let (x, lp) = self.sample_on(&mut tape, s, zv, y)?;
        Ok((tape.value(x).clone(), tape.value(lp).as_slice().to_vec()))
    }

    /// Draws `rows` prior vectors from `rng`.
    pub fn draw_noise<R: Rng>(&self, rows: usize, rng: &mut R) -> Matrix {
        let data = (0..rows * self.config.dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Matrix::from_vec(rows, self.config.dim, data)
    }

    pub fn sample_batch<R: Rng>(&self, ctxs: &[ConditionContext], rows: usize, rng: &mut R) -> Result<(Matrix, Vec<f64>)> {
        let z = self.draw_noise(rows, rng);
        self.sample_from_noise(&z, ctxs)
    }

    pub fn sample<R: Rng>(&self, ctx: &ConditionContext, rng: &mut R) -> Result<(Vec<f64>, f64)> {
        let (x, lp) = self.sample_batch(std::slice::from_ref(ctx), 1, rng)?;
        Ok((x.into_vec(), lp[0]))
    }

    /// `∇ₓ log p(x | ctx)` for each row.
    pub fn score_batch(&self, xs: &Matrix, ctxs: &[ConditionContext]) -> Result<Matrix> {
        let mut tape = Tape::new();
        let s = tape.add_store(&self.params);
        let y = self.encode_contexts(&mut tape, s, ctxs, xs.rows())?;
        let x = tape.leaf(xs.clone());
        let lp = self.log_prob_on(&mut tape, s, x, y)?;
        let g = tape.backward(lp, &Matrix::filled(xs.rows(), 1, 1.0))?;
        Ok(g.wrt(x).cloned().unwrap_or_else(|| Matrix::zeros(xs.rows(), xs.cols())))
    }

    pub fn score_wrt_input(&self, x: &[f64], ctx: &ConditionContext) -> Result<Vec<f64>> {
        Ok(self.score_batch(&Matrix::row(x), std::slice::from_ref(ctx))?.into_vec())
    }

    // ---- persistence ----------------------------------------------------

    /// Self-describing architecture header.
    pub fn arch_header(&self) -> KvText {
        let c = &self.config;
        let mut kv = KvText::new();
        kv.set("kind", "flow");
        kv.set("d", c.dim);
        kv.set("cond_dim", c.cond_dim);
        kv.set("k", c.rep_dim);
        kv.set("blocks", c.blocks);
        kv.set("channels", c.channels);
        kv.set("coupling_layers", c.coupling_layers);
        kv.set("encoder_layers", c.encoder_layers);
        kv.set("encoder_width", c.encoder_width);
        kv.set("layernorm", c.layernorm);
        kv.set("activation", c.activation.name());
        kv.set("log_scale_clamp", c.log_scale_clamp);
        kv.set("seed", c.seed);
        let parity: Vec<&str> = self.blocks.iter().map(|b| b.coupling.parity().name()).collect();
        kv.set("parity", parity.join(","));
        for (t, b) in self.blocks.iter().enumerate() {
            let p: Vec<String> = b.linear.permutation().iter().map(|v| v.to_string()).collect();
            kv.set(&format!("perm.{t}"), p.join(","));
        }
        kv
    }

    fn config_from_header(kv: &KvText) -> Result<(FlowConfig, Vec<Vec<usize>>)> {
        if kv.get("kind") != Some("flow") {
            return Err(Error::Format("checkpoint does not hold a flow model".into()));
        }
        let activation = kv.require("activation")?;
        let config = FlowConfig {
            dim: kv.parse_value("d")?,
            cond_dim: kv.parse_value("cond_dim")?,
            rep_dim: kv.parse_value("k")?,
            blocks: kv.parse_value("blocks")?,
            channels: kv.parse_value("channels")?,
            coupling_layers: kv.parse_value("coupling_layers")?,
            encoder_layers: kv.parse_value("encoder_layers")?,
            encoder_width: kv.parse_value("encoder_width")?,
            layernorm: kv.parse_value("layernorm")?,
            activation: Activation::parse(activation).ok_or_else(|| Error::Format(format!("unknown activation {activation}")))?,
            permutation: PermutationInit::Random,
            log_scale_clamp: kv.parse_value("log_scale_clamp")?,
            seed: kv.parse_value("seed")?,
        };
        let perms = (0..config.blocks)
            .map(|t| {
                kv.require(&format!("perm.{t}"))?
                    .split(',')
                    .map(|v| v.parse::<usize>().map_err(|_| Error::Format(format!("bad permutation entry '{v}'"))))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((config, perms))
    }

    pub fn write_to<W: std::io::Write>(&self, w: W) -> Result<()> {
        write_checkpoint(w, &self.params, &self.arch_header().to_string())
    }

    pub fn read_from<R: std::io::Read>(r: R) -> Result<Self> {
        let (store, header) = read_checkpoint(r)?;
        let kv = KvText::parse(&header)?;
        let (config, perms) = Self::config_from_header(&kv)?;
        let mut model = Self::with_permutations(config, perms)?;
        if model.params.slices() != store.slices() {
            return Err(Error::Format("checkpoint slices do not match the architecture header".into()));
        }
        model.params = store;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

fn at_block(e: Error, t: usize) -> Error {
    match e {
        Error::NonFinite { location } => Error::NonFinite { location: format!("block {t}: {location}") },
        other => other,
    }
}

/// `log N(z; 0, I)` per row.
pub fn std_normal_log_density_on(tape: &mut Tape<'_>, z: Var) -> Var {
    let d = tape.value(z).cols() as f64;
    let sq = tape.square(z);
    let s = tape.row_sum(sq);
    let half = tape.scale(s, -0.5);
    tape.shift(half, -0.5 * d * (2.0 * PI).ln())
}

pub fn std_normal_log_density(z: &[f64]) -> f64 {
    -0.5 * z.iter().map(|v| v * v).sum::<f64>() - 0.5 * z.len() as f64 * (2.0 * PI).ln()
}
